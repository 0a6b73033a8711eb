//! Synthetic panels with known truth, and a brute-force consumer-choice
//! simulator that serves as an independent oracle for the analytic shares.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blp::{ChoiceModel, ChoiceModelConfig, DrawScheme, RandomCoefficients};
use crate::embed::angular_distance;
use crate::error::{Error, Result};
use crate::panel::{ColumnRole, MarketPanel, ObsKey, Observation, Review, SizePolicy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTruth {
    /// Taste for the characteristics `x1, x2, ...`.
    pub beta: Vec<f64>,
    pub alpha: f64,
    pub sigma_nest: f64,
    /// Recommendation effects, one per strategy in `rec_names`.
    pub theta_rec: Vec<f64>,
    pub rec_names: Vec<String>,
    /// Random-coefficient standard deviations on the characteristics.
    pub sigma_rc: Vec<f64>,
    pub intercept: f64,
    pub xi_sd: f64,
    /// Loading of the demand shock in the recommendation propensity.
    pub confounding: f64,
    pub rec_intercept: f64,
    /// How strongly the recommender pushes isolated alternatives
    /// (diversification).
    pub diversification: f64,
    pub rec_noise_sd: f64,
    /// Recommendation slots per alternative-period; 0 gives a continuous
    /// intensity.
    pub rec_slots: u64,
    pub nests: usize,
    pub alt_effect_sd: f64,
    pub price_tiers: usize,
    pub price_noise_sd: f64,
    /// Per-period random-walk step of each alternative's topic weight.
    pub isolation_drift: f64,
    pub shared_words: usize,
    pub topic_words: usize,
    pub reviews_per_period: usize,
    pub words_per_review: usize,
    pub market_size: f64,
    pub rounding: bool,
    pub draws: usize,
    pub draw_scheme: DrawScheme,
    pub seed: u64,
}

impl Default for SyntheticTruth {
    fn default() -> Self {
        Self {
            beta: vec![1.0],
            alpha: 0.5,
            sigma_nest: 0.0,
            theta_rec: vec![1.0],
            rec_names: vec!["rec_trending".into()],
            sigma_rc: Vec::new(),
            intercept: -1.0,
            xi_sd: 0.5,
            confounding: 0.0,
            rec_intercept: -2.0,
            diversification: 4.0,
            rec_noise_sd: 0.5,
            rec_slots: 0,
            nests: 2,
            alt_effect_sd: 0.0,
            price_tiers: 3,
            price_noise_sd: 0.25,
            isolation_drift: 0.02,
            shared_words: 20,
            topic_words: 10,
            reviews_per_period: 2,
            words_per_review: 30,
            market_size: (1u64 << 20) as f64,
            rounding: false,
            draws: 200,
            draw_scheme: DrawScheme::Halton,
            seed: 1,
        }
    }
}

impl SyntheticTruth {
    pub fn validate(&self) -> Result<()> {
        let finite = self
            .beta
            .iter()
            .chain(&self.theta_rec)
            .chain(&self.sigma_rc)
            .chain([
                &self.alpha,
                &self.sigma_nest,
                &self.intercept,
                &self.xi_sd,
                &self.confounding,
                &self.rec_intercept,
                &self.diversification,
                &self.rec_noise_sd,
                &self.alt_effect_sd,
                &self.price_noise_sd,
                &self.isolation_drift,
                &self.market_size,
            ])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("truth values must be finite"));
        }
        if !(0.0..1.0).contains(&self.sigma_nest) {
            return Err(Error::config("sigma_nest must lie in [0, 1)"));
        }
        if self.xi_sd < 0.0 {
            return Err(Error::config("xi_sd must be >= 0"));
        }
        if self.theta_rec.len() != self.rec_names.len() {
            return Err(Error::config("theta_rec and rec_names differ in length"));
        }
        if !self.sigma_rc.is_empty() && self.sigma_rc.len() != self.beta.len() {
            return Err(Error::config("sigma_rc needs one entry per characteristic"));
        }
        if self.random_coefficients() && self.sigma_nest > 0.0 {
            return Err(Error::config("random coefficients and nests cannot be combined"));
        }
        if self.nests == 0 || self.price_tiers == 0 || self.market_size <= 0.0 {
            return Err(Error::config("nests, price_tiers and market_size must be positive"));
        }
        Ok(())
    }

    pub fn random_coefficients(&self) -> bool {
        self.sigma_rc.iter().any(|&s| s > 0.0)
    }

    pub fn characteristic_names(&self) -> Vec<String> {
        (1..=self.beta.len()).map(|k| format!("x{k}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimDims {
    pub markets: usize,
    pub alternatives: usize,
    pub periods: usize,
}

/// A generated panel plus the latent quantities behind it, aligned with the
/// panel rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPanel {
    #[serde(skip)]
    pub panel: MarketPanel,
    pub truth: SyntheticTruth,
    pub dims: SimDims,
    pub xi: Vec<f64>,
    pub delta: Vec<f64>,
    pub shares: Vec<f64>,
    pub true_isolation: Vec<f64>,
    /// Correlation of true isolation with the first recommendation column.
    pub corr_isolation_rec: f64,
    pub corr_isolation_xi: f64,
}

impl SyntheticPanel {
    pub fn write_truth<W: std::io::Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Latent position of an alternative: weight `1 - a` on the shared axis and
/// `a` on its own topic axis.
fn latent_vector(a: f64, topic: usize, topics: usize) -> Vec<f64> {
    let mut v = vec![0.0; topics + 1];
    v[0] = 1.0 - a;
    v[topic + 1] = a;
    v
}

struct MarketDraw {
    observations: Vec<Observation>,
    reviews: Vec<Review>,
    xi: Vec<f64>,
    delta: Vec<f64>,
    shares: Vec<f64>,
    isolation: Vec<f64>,
}

fn market_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn build_model(truth: &SyntheticTruth, nests: Vec<usize>, rc_x: DMatrix<f64>) -> Result<ChoiceModel> {
    let config = if truth.random_coefficients() {
        ChoiceModelConfig::RandomCoefficients(RandomCoefficients {
            sigmas: truth.sigma_rc.clone(),
            draws: truth.draws,
            scheme: truth.draw_scheme,
            seed: truth.seed,
        })
    } else if truth.sigma_nest > 0.0 {
        ChoiceModelConfig::NestedLogit { sigma: truth.sigma_nest }
    } else {
        ChoiceModelConfig::Logit
    };
    ChoiceModel::new(config, nests, rc_x)
}

fn generate_market(truth: &SyntheticTruth, dims: &SimDims, r: usize) -> Result<MarketDraw> {
    let mut rng = market_rng(truth.seed, r as u64 + 1);
    let market = format!("r{r:03}");
    let n = dims.alternatives;
    let nest_of: Vec<usize> = (0..n).map(|j| j % truth.nests).collect();
    let mut weight: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    let tier: Vec<f64> = (0..n).map(|_| rng.random_range(1..=truth.price_tiers) as f64).collect();
    let alt_effect: Vec<f64> = (0..n)
        .map(|_| truth.alt_effect_sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let nrec = truth.rec_names.len();
    let k = truth.beta.len();

    let mut out = MarketDraw {
        observations: Vec::with_capacity(n * dims.periods),
        reviews: Vec::new(),
        xi: Vec::new(),
        delta: Vec::new(),
        shares: Vec::new(),
        isolation: Vec::new(),
    };
    for t in 1..=dims.periods {
        if t > 1 {
            for a in weight.iter_mut() {
                *a = (*a + truth.isolation_drift * rng.sample::<f64, _>(StandardNormal)).clamp(0.02, 0.98);
            }
        }
        let latent: Vec<Vec<f64>> = (0..n).map(|j| latent_vector(weight[j], nest_of[j], truth.nests)).collect();
        let isolation: Vec<f64> = (0..n)
            .map(|j| {
                let d: Vec<f64> = (0..n)
                    .filter(|&m| m != j)
                    .map(|m| angular_distance(&latent[j], &latent[m]).unwrap_or(0.0))
                    .collect();
                if d.is_empty() {
                    0.0
                } else {
                    d.iter().sum::<f64>() / d.len() as f64
                }
            })
            .collect();
        let mut rows = Vec::with_capacity(n);
        let mut deltas = Vec::with_capacity(n);
        let mut rc_rows = Vec::with_capacity(n);
        for j in 0..n {
            let xs: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let price = tier[j] + truth.price_noise_sd * rng.sample::<f64, _>(StandardNormal);
            let xi = truth.xi_sd * rng.sample::<f64, _>(StandardNormal);
            let recs: Vec<f64> = (0..nrec)
                .map(|_| {
                    let index = truth.rec_intercept
                        + truth.diversification * isolation[j]
                        + truth.confounding * xi
                        + truth.rec_noise_sd * rng.sample::<f64, _>(StandardNormal);
                    let p = logistic(index);
                    if truth.rec_slots == 0 {
                        p
                    } else {
                        let b = Binomial::new(truth.rec_slots, p).expect("valid binomial");
                        b.sample(&mut rng) as f64 / truth.rec_slots as f64
                    }
                })
                .collect();
            let delta = truth.intercept
                + xs.iter().zip(&truth.beta).map(|(x, b)| x * b).sum::<f64>()
                - truth.alpha * price
                + recs.iter().zip(&truth.theta_rec).map(|(x, b)| x * b).sum::<f64>()
                + alt_effect[j]
                + xi;
            let mut values = BTreeMap::new();
            for (name, v) in truth.characteristic_names().into_iter().zip(&xs) {
                values.insert(name, *v);
            }
            for (name, v) in truth.rec_names.iter().zip(&recs) {
                values.insert(name.clone(), *v);
            }
            rc_rows.push(xs);
            deltas.push(delta);
            out.xi.push(xi);
            rows.push(Observation {
                key: ObsKey::new(market.clone(), format!("{market}a{j:03}"), t as i64),
                quantity: 0.0,
                price,
                nest: format!("g{}", nest_of[j]),
                category: Some(format!("c{}", nest_of[j])),
                ranking: None,
                values,
            });
        }
        let rc_x = DMatrix::from_fn(n, if truth.random_coefficients() { k } else { 0 }, |i, d| rc_rows[i][d]);
        let model = build_model(truth, nest_of.clone(), rc_x)?;
        let idx: Vec<usize> = (0..n).collect();
        let (shares, s0) = model.cell_shares(&idx, &deltas).ok_or_else(|| Error::OutsideShare {
            market: market.clone(),
            period: t as i64,
            outside: f64::NAN,
        })?;
        if !(s0 > 0.0) {
            return Err(Error::OutsideShare {
                market: market.clone(),
                period: t as i64,
                outside: s0,
            });
        }
        for (j, mut obs) in rows.into_iter().enumerate() {
            let q = shares[j] * truth.market_size;
            obs.quantity = if truth.rounding { q.round() } else { q };
            out.observations.push(obs);
        }
        out.delta.extend(deltas);
        out.shares.extend(shares);
        out.isolation.extend(isolation);

        for j in 0..n {
            let alt_id = format!("{market}a{j:03}");
            for _ in 0..truth.reviews_per_period {
                let words: Vec<String> = (0..truth.words_per_review)
                    .map(|_| {
                        if rng.random::<f64>() < weight[j] {
                            format!("t{}w{}", nest_of[j], rng.random_range(0..truth.topic_words.max(1)))
                        } else {
                            format!("cw{}", rng.random_range(0..truth.shared_words.max(1)))
                        }
                    })
                    .collect();
                out.reviews.push(Review {
                    alt_id: alt_id.clone(),
                    period: t as i64,
                    text: words.join(" "),
                });
            }
        }
    }
    Ok(out)
}

/// Draws a panel from the truth. Markets are generated independently from
/// per-market random streams, so the output does not depend on the number of
/// worker threads.
pub fn generate_panel(truth: &SyntheticTruth, dims: SimDims) -> Result<SyntheticPanel> {
    truth.validate()?;
    if dims.markets == 0 || dims.periods == 0 || dims.alternatives < 2 {
        return Err(Error::config("need at least one market and period and two alternatives per market"));
    }
    let markets: Vec<MarketDraw> = (0..dims.markets)
        .into_par_iter()
        .map(|r| generate_market(truth, &dims, r))
        .collect::<Result<_>>()?;
    let mut roles = BTreeMap::new();
    for name in truth.characteristic_names() {
        roles.insert(name, ColumnRole::Characteristic);
    }
    for name in &truth.rec_names {
        roles.insert(name.clone(), ColumnRole::Recommendation);
    }
    let mut market_size = BTreeMap::new();
    let mut observations = Vec::new();
    let mut reviews = Vec::new();
    let (mut xi, mut delta, mut shares, mut iso) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (r, m) in markets.into_iter().enumerate() {
        market_size.insert(format!("r{r:03}"), truth.market_size);
        observations.extend(m.observations);
        reviews.extend(m.reviews);
        xi.extend(m.xi);
        delta.extend(m.delta);
        shares.extend(m.shares);
        iso.extend(m.isolation);
    }
    let mut panel = MarketPanel::from_observations(&roles, observations, market_size, SizePolicy::Population)?;
    panel.reviews = reviews;
    let first_rec = truth
        .rec_names
        .first()
        .map(|n| panel.numeric(n))
        .transpose()?
        .unwrap_or_default();
    Ok(SyntheticPanel {
        corr_isolation_rec: if first_rec.is_empty() { f64::NAN } else { correlation(&iso, &first_rec) },
        corr_isolation_xi: correlation(&iso, &xi),
        panel,
        truth: truth.clone(),
        dims,
        xi,
        delta,
        shares,
        true_isolation: iso,
    })
}

/// Empirical choice frequencies from simulated consumers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceFrequencies {
    pub shares: Vec<f64>,
    pub outside: f64,
    pub consumers: usize,
}

impl ChoiceFrequencies {
    /// Monte Carlo standard error of each frequency under the given
    /// probabilities.
    pub fn standard_errors(&self, probs: &[f64]) -> Vec<f64> {
        probs
            .iter()
            .map(|p| (p * (1.0 - p) / self.consumers as f64).sqrt())
            .collect()
    }
}

/// Positive stable variate with Laplace transform `exp(-s^a)`, `0 < a < 1`
/// (Kanter's representation).
fn positive_stable<R: Rng>(a: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(0.0..PI);
    let e: f64 = rng.sample(Exp1);
    (a * u).sin() / u.sin().powf(1.0 / a) * ((1.0 - a) * u).sin().powf((1.0 - a) / a) / e.powf((1.0 - a) / a)
}

/// Simulates `n_consumers` utility maximizers facing mean utilities `delta`
/// for the alternatives `rows` (indices into the model's nest and
/// random-coefficient data). Extreme-value shocks are drawn as `-ln E` with
/// `E ~ Exp(1)`, so the argmax of `delta_j - ln E_j` is the argmax of
/// `exp(delta_j) / E_j`.
///
/// Nested logit: with `lambda = 1 - sigma`, the shock of alternative `j` in
/// nest `g` is `lambda (-ln E_ij) + lambda ln V_g` with `V_g` positive
/// stable of index `lambda`. Then `P(shock <= x) = E[exp(-V e^{-x/lambda})]
/// = exp(-e^{-x})`, so every shock is standard Gumbel, shocks in a nest share
/// `V_g`, and the maximum over a nest is `lambda ln(sum_j e^{delta_j/lambda})`
/// plus a standard Gumbel, which is the nested-logit choice structure.
///
/// Random coefficients: consumer `c` uses taste draw `c mod n_s` of the
/// model, so the target frequencies are exactly the model's simulated shares.
pub fn brute_force_choice_probs(
    model: &ChoiceModel,
    rows: &[usize],
    delta: &[f64],
    n_consumers: usize,
    seed: u64,
) -> ChoiceFrequencies {
    let j = rows.len();
    const CHUNK: usize = 1 << 16;
    let chunks = n_consumers.div_ceil(CHUNK);
    let counts: Vec<Vec<u64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = market_rng(seed, c as u64);
            let lo = c * CHUNK;
            let hi = ((c + 1) * CHUNK).min(n_consumers);
            let mut counts = vec![0u64; j + 1];
            match &model.config {
                ChoiceModelConfig::Logit => {
                    let w: Vec<f64> = delta.iter().map(|d| d.exp()).collect();
                    for _ in lo..hi {
                        let mut best = 1.0 / rng.sample::<f64, _>(Exp1);
                        let mut choice = j;
                        for (k, wk) in w.iter().enumerate() {
                            let v = wk / rng.sample::<f64, _>(Exp1);
                            if v > best {
                                best = v;
                                choice = k;
                            }
                        }
                        counts[choice] += 1;
                    }
                }
                ChoiceModelConfig::NestedLogit { sigma } => {
                    let lambda = 1.0 - sigma;
                    let nest_codes: Vec<usize> = rows.iter().map(|&r| model.nests[r]).collect();
                    let mut groups: Vec<usize> = nest_codes.clone();
                    groups.sort_unstable();
                    groups.dedup();
                    let slot: Vec<usize> = nest_codes
                        .iter()
                        .map(|g| groups.binary_search(g).expect("nest present"))
                        .collect();
                    let w: Vec<f64> = delta.iter().map(|d| (d / lambda).exp()).collect();
                    let mut v = vec![1.0; groups.len()];
                    for _ in lo..hi {
                        if lambda < 1.0 {
                            for vg in v.iter_mut() {
                                *vg = positive_stable(lambda, &mut rng);
                            }
                        }
                        let mut best = -rng.sample::<f64, _>(Exp1).ln();
                        let mut choice = j;
                        for k in 0..j {
                            let a = w[k] * v[slot[k]] / rng.sample::<f64, _>(Exp1);
                            let u = lambda * a.ln();
                            if u > best {
                                best = u;
                                choice = k;
                            }
                        }
                        counts[choice] += 1;
                    }
                }
                ChoiceModelConfig::RandomCoefficients(rc) => {
                    let draws = model.draws.as_ref().expect("draws for random coefficients");
                    for c in lo..hi {
                        let nu = draws.row(c % draws.count);
                        let mut best = -rng.sample::<f64, _>(Exp1).ln();
                        let mut choice = j;
                        for (k, &r) in rows.iter().enumerate() {
                            let mu: f64 = (0..rc.sigmas.len()).map(|d| rc.sigmas[d] * nu[d] * model.rc_x[(r, d)]).sum();
                            let u = delta[k] + mu - rng.sample::<f64, _>(Exp1).ln();
                            if u > best {
                                best = u;
                                choice = k;
                            }
                        }
                        counts[choice] += 1;
                    }
                }
            }
            counts
        })
        .collect();
    let mut total = vec![0u64; j + 1];
    for c in counts {
        for (t, v) in total.iter_mut().zip(c) {
            *t += v;
        }
    }
    let n = n_consumers as f64;
    ChoiceFrequencies {
        shares: total[..j].iter().map(|&c| c as f64 / n).collect(),
        outside: total[j] as f64 / n,
        consumers: n_consumers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{compute_shares, ZeroPolicy};

    fn dims() -> SimDims {
        SimDims {
            markets: 3,
            alternatives: 6,
            periods: 4,
        }
    }

    #[test]
    fn same_seed_same_panel() {
        let truth = SyntheticTruth::default();
        let a = generate_panel(&truth, dims()).unwrap();
        let b = generate_panel(&truth, dims()).unwrap();
        assert_eq!(a, b);
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        a.panel.write_csv(&mut ca).unwrap();
        b.panel.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        let other = generate_panel(&SyntheticTruth { seed: 2, ..truth }, dims()).unwrap();
        assert_ne!(a.xi, other.xi);
    }

    #[test]
    fn continuous_shares_round_trip_exactly() {
        let truth = SyntheticTruth {
            sigma_nest: 0.4,
            ..Default::default()
        };
        let sim = generate_panel(&truth, dims()).unwrap();
        let table = compute_shares(&sim.panel, ZeroPolicy::Drop).unwrap();
        assert_eq!(table.rows.len(), sim.panel.len());
        for row in &table.rows {
            assert_eq!(row.share, sim.shares[row.obs]);
        }
    }

    #[test]
    fn slots_produce_zero_recommendations() {
        let truth = SyntheticTruth {
            rec_slots: 3,
            ..Default::default()
        };
        let sim = generate_panel(&truth, dims()).unwrap();
        let rec = sim.panel.numeric("rec_trending").unwrap();
        assert!(rec.contains(&0.0));
        assert!(rec.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn nested_with_random_coefficients_rejected() {
        let truth = SyntheticTruth {
            sigma_nest: 0.3,
            sigma_rc: vec![0.5],
            ..Default::default()
        };
        assert!(matches!(generate_panel(&truth, dims()), Err(Error::Config(_))));
    }

    #[test]
    fn symmetric_oracle_thirds() {
        let f = brute_force_choice_probs(&ChoiceModel::logit(), &[0, 1], &[0.0, 0.0], 1_000_000, 9);
        for v in f.shares.iter().chain([&f.outside]) {
            assert!((v - 1.0 / 3.0).abs() < 0.002, "{v}");
        }
    }

    #[test]
    fn dominant_alternative_always_chosen() {
        let f = brute_force_choice_probs(&ChoiceModel::logit(), &[0], &[30.0], 10_000, 1);
        assert_eq!(f.shares[0], 1.0);
    }

    #[test]
    fn stable_variate_laplace_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = 0.5;
        let n = 200_000;
        let s = 1.3f64;
        let mean: f64 = (0..n).map(|_| (-s * positive_stable(a, &mut rng)).exp()).sum::<f64>() / n as f64;
        assert!((mean - (-s.powf(a)).exp()).abs() < 0.005, "{mean}");
    }
}
