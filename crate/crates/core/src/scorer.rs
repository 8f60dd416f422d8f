//! Expertness scorers. Each maps a state to a calibrated score L(s) in [0,1]:
//! high near expert data, low near negatives.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::par;
use crate::recon::{self, Mlp};
use crate::rng::{mix, seeded, stream};
use crate::toyworld::{dist, DomainBox, ExpertDataset, StateVec};

/// Squared scaled distance beyond which the kernel is exactly zero (5 bandwidths).
pub const KERNEL_CUTOFF2: f64 = 25.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Knn,
    Rbf,
    Recon,
}

impl std::fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScorerKind::Knn => "knn",
            ScorerKind::Rbf => "rbf",
            ScorerKind::Recon => "recon",
        })
    }
}

impl std::str::FromStr for ScorerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "knn" => Ok(ScorerKind::Knn),
            "rbf" => Ok(ScorerKind::Rbf),
            "recon" => Ok(ScorerKind::Recon),
            other => Err(invalid(format!("unknown scorer kind `{other}`"))),
        }
    }
}

fn one() -> f64 {
    1.0
}

fn is_one(v: &f64) -> bool {
    *v == 1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub state: StateVec,
    pub weight: f64,
    /// Bandwidth multiplier for this anchor's kernel (rbf only).
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub scale: f64,
}

pub const W_MAX: f64 = 1.0;

impl Anchor {
    pub fn new(state: StateVec, weight: f64) -> Self {
        Anchor {
            state,
            weight,
            scale: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub lo: f64,
    pub hi: f64,
}

impl Calibration {
    pub fn apply(&self, raw: f64) -> f64 {
        (raw - self.lo) / (self.hi - self.lo)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Params {
    Knn {
        k: usize,
        sigma_knn: f64,
        anchors: Vec<Anchor>,
    },
    Rbf {
        sigma: Vec<f64>,
        anchors: Vec<Anchor>,
        /// Anchors added after fitting. Their weights are in calibrated units.
        #[serde(default)]
        edits: Vec<Anchor>,
    },
    Recon {
        mlp: Mlp,
        tau: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerModel {
    pub domain: DomainBox,
    pub params: Params,
    pub calibration: Option<Calibration>,
}

fn kernel(s: &[f64], a: &[f64], sigma: &[f64], scale: f64) -> f64 {
    let q: f64 = s
        .iter()
        .zip(a)
        .zip(sigma)
        .map(|((x, y), sg)| {
            let z = (x - y) / (sg * scale);
            z * z
        })
        .sum();
    if q > KERNEL_CUTOFF2 {
        0.0
    } else {
        (-0.5 * q).exp()
    }
}

impl ScorerModel {
    pub fn kind(&self) -> ScorerKind {
        match self.params {
            Params::Knn { .. } => ScorerKind::Knn,
            Params::Rbf { .. } => ScorerKind::Rbf,
            Params::Recon { .. } => ScorerKind::Recon,
        }
    }

    /// An rbf model built from explicit anchors, with a fixed calibration.
    pub fn rbf(
        domain: DomainBox,
        anchors: Vec<Anchor>,
        sigma: Vec<f64>,
        calibration: Calibration,
    ) -> Result<Self> {
        let m = ScorerModel {
            domain,
            params: Params::Rbf {
                sigma,
                anchors,
                edits: vec![],
            },
            calibration: Some(calibration),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        match &self.params {
            Params::Knn {
                k,
                anchors,
                sigma_knn,
            } => {
                if *k < 1 || *k > anchors.len() || !(*sigma_knn > 0.0) {
                    return Err(invalid("knn needs 1 <= k <= |anchors| and sigma_knn > 0"));
                }
            }
            Params::Rbf {
                sigma,
                anchors,
                edits,
            } => {
                if sigma.len() != self.domain.dims || sigma.iter().any(|s| !(*s > 0.0)) {
                    return Err(invalid(
                        "rbf bandwidths must be positive, one per dimension",
                    ));
                }
                if anchors
                    .iter()
                    .chain(edits)
                    .any(|a| a.weight.abs() > W_MAX || !(a.scale > 0.0))
                {
                    return Err(invalid(
                        "anchor weight exceeds w_max or scale is not positive",
                    ));
                }
            }
            Params::Recon { mlp, tau } => {
                mlp.check()?;
                if mlp.widths[0] != self.domain.dims || !(*tau > 0.0) {
                    return Err(invalid(
                        "recon input width must equal d and tau must be positive",
                    ));
                }
            }
        }
        if let Some(c) = self.calibration {
            if !(c.lo < c.hi) {
                return Err(invalid("calibration needs lo < hi"));
            }
        }
        Ok(())
    }

    fn normalize(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .enumerate()
            .map(|(i, v)| (v - self.domain.lo[i]) / self.domain.extent(i))
            .collect()
    }

    fn knn_raw(&self, s: &[f64], skip: Option<usize>) -> Result<f64> {
        let Params::Knn {
            k,
            sigma_knn,
            anchors,
        } = &self.params
        else {
            unreachable!()
        };
        if anchors.is_empty() {
            return Err(invalid("empty anchor set"));
        }
        let mut d: Vec<(f64, usize)> = anchors
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(i, a)| (dist(s, &a.state.values), i))
            .collect();
        let kk = (*k).min(d.len());
        if kk == 0 {
            return Err(invalid("empty anchor set"));
        }
        d.select_nth_unstable_by(kk - 1, |a, b| a.partial_cmp(b).expect("finite distances"));
        d.truncate(kk);
        Ok(d.iter()
            .map(|(di, i)| anchors[*i].weight / (1.0 + di / sigma_knn))
            .sum::<f64>()
            / kk as f64)
    }

    /// Uncalibrated score. For rbf this is the weighted kernel sum over fitted anchors.
    pub fn raw(&self, s: &[f64]) -> Result<f64> {
        match &self.params {
            Params::Knn { .. } => self.knn_raw(s, None),
            Params::Rbf { sigma, anchors, .. } => {
                if anchors.is_empty() {
                    return Err(invalid("empty anchor set"));
                }
                Ok(anchors
                    .iter()
                    .map(|a| a.weight * kernel(s, &a.state.values, sigma, a.scale))
                    .sum())
            }
            Params::Recon { mlp, tau } => Ok((-mlp.error(&self.normalize(s)) / tau).exp()),
        }
    }

    /// Calibrated score before clamping to [0,1], including post-fit edits.
    pub fn pre_clamp(&self, s: &[f64]) -> Result<f64> {
        let cal = self
            .calibration
            .ok_or_else(|| invalid("model is not calibrated"))?;
        let mut l = cal.apply(self.raw(s)?);
        if let Params::Rbf { sigma, edits, .. } = &self.params {
            l += edits
                .iter()
                .map(|a| a.weight * kernel(s, &a.state.values, sigma, a.scale))
                .sum::<f64>();
        }
        Ok(l)
    }

    pub fn score(&self, s: &[f64]) -> Result<f64> {
        Ok(self.pre_clamp(s)?.clamp(0.0, 1.0))
    }

    pub fn score_many(&self, states: &[StateVec]) -> Result<Vec<f64>> {
        par::map(states, |s| self.score(&s.values))
            .into_iter()
            .collect()
    }

    fn calibrate(&mut self, train: &[StateVec]) -> Result<()> {
        let raws: Vec<f64> = match &self.params {
            Params::Knn { .. } => {
                par::map_range(train.len(), |i| self.knn_raw(&train[i].values, Some(i)))
                    .into_iter()
                    .collect::<Result<_>>()?
            }
            _ => par::map(train, |s| self.raw(&s.values))
                .into_iter()
                .collect::<Result<_>>()?,
        };
        let lo = quantile(&raws, 0.01);
        let hi = quantile(&raws, 0.99);
        if !(hi - lo > 1e-12) {
            return Err(invalid(
                "degenerate calibration: raw scores are constant on training data",
            ));
        }
        self.calibration = Some(Calibration { lo, hi });
        Ok(())
    }

    pub fn bandwidth(&self) -> Option<&[f64]> {
        match &self.params {
            Params::Rbf { sigma, .. } => Some(sigma),
            _ => None,
        }
    }
}

/// Linear-interpolated quantile of unsorted data.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let pos = q * (s.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < s.len() {
        s[i] + f * (s[i + 1] - s[i])
    } else {
        s[i]
    }
}

pub fn median(v: &[f64]) -> f64 {
    quantile(v, 0.5)
}

pub fn raw_score(model: &ScorerModel, s: &StateVec) -> Result<f64> {
    model.domain.check(s)?;
    model.score(&s.values)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn contrast(model: &ScorerModel, experts: &[StateVec], negatives: &[StateVec]) -> Result<f64> {
    if experts.is_empty() || negatives.is_empty() {
        return Err(invalid("contrast needs non-empty expert and negative sets"));
    }
    Ok(mean(&model.score_many(experts)?) - mean(&model.score_many(negatives)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeStrategy {
    Uniform,
    Perturb,
    ConstraintViolating,
    Patch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeSet {
    pub states: Vec<StateVec>,
    pub strategy: NegativeStrategy,
    /// For perturbation negatives, the index of the source expert state.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<usize>,
}

impl NegativeSet {
    /// First half trains, second half is held out.
    pub fn halves(&self) -> (&[StateVec], &[StateVec]) {
        self.states.split_at(self.states.len() / 2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegativeConfig {
    pub strategy: NegativeStrategy,
    pub n: usize,
    pub r_min: f64,
    pub r_max: f64,
}

impl Default for NegativeConfig {
    fn default() -> Self {
        NegativeConfig {
            strategy: NegativeStrategy::Uniform,
            n: 400,
            r_min: 0.05,
            r_max: 0.2,
        }
    }
}

pub fn sample_negatives(
    domain: &DomainBox,
    experts: &ExpertDataset,
    cfg: &NegativeConfig,
    seed: u64,
) -> Result<NegativeSet> {
    if cfg.n == 0 {
        return Err(invalid("sample_negatives needs n >= 1"));
    }
    if !(cfg.r_min >= 0.0 && cfg.r_max >= cfg.r_min) {
        return Err(invalid("need 0 <= r_min <= r_max"));
    }
    let mut rng = seeded(seed, stream::NEGATIVE);
    let cap = 1000 * cfg.n;
    let mut attempts = 0;
    let mut states = Vec::with_capacity(cfg.n);
    let mut sources = Vec::new();
    match cfg.strategy {
        NegativeStrategy::Uniform => {
            while states.len() < cfg.n {
                if attempts >= cap {
                    return Err(Error::Exhausted {
                        what: "uniform negatives".into(),
                        attempts,
                    });
                }
                attempts += 1;
                let p = domain.sample(&mut rng);
                if experts
                    .states
                    .iter()
                    .all(|e| dist(&p, &e.values) >= cfg.r_min)
                {
                    states.push(StateVec::new(p));
                }
            }
        }
        NegativeStrategy::Perturb => {
            if experts.is_empty() {
                return Err(invalid("perturbation needs expert states"));
            }
            let idx: Vec<usize> = (0..experts.len()).collect();
            while states.len() < cfg.n {
                if attempts >= cap {
                    return Err(Error::Exhausted {
                        what: "perturbation negatives".into(),
                        attempts,
                    });
                }
                attempts += 1;
                let i = *idx.choose(&mut rng).expect("non-empty");
                let src = &experts.states[i].values;
                let dir: Vec<f64> = (0..domain.dims)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    continue;
                }
                let r = if cfg.r_max > cfg.r_min {
                    rng.random_range(cfg.r_min..=cfg.r_max)
                } else {
                    cfg.r_min
                };
                let p: Vec<f64> = src
                    .iter()
                    .zip(&dir)
                    .map(|(s, d)| s + r * d / norm)
                    .collect();
                if domain.contains(&p) {
                    states.push(StateVec::new(p));
                    sources.push(i);
                }
            }
        }
        other => {
            return Err(invalid(format!(
                "{other:?} negatives are produced elsewhere, not sampled"
            )))
        }
    }
    Ok(NegativeSet {
        states,
        strategy: cfg.strategy,
        sources,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    /// Base kernel bandwidth; candidates are this times each grid multiplier.
    pub bandwidth: f64,
    pub sigma_grid: Vec<f64>,
    pub k: usize,
    pub iterations: usize,
    pub step: f64,
    pub margin: f64,
    pub hidden: Vec<usize>,
    pub ensemble: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            bandwidth: 0.1,
            sigma_grid: vec![0.5, 0.75, 1.0],
            k: 5,
            iterations: 1500,
            step: 0.01,
            margin: 0.5,
            hidden: vec![8],
            ensemble: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin <= 1.0) || self.ensemble < 1 {
            return Err(invalid("margin must be in (0,1] and ensemble >= 1"));
        }
        if !(self.bandwidth > 0.0)
            || self.sigma_grid.is_empty()
            || self.sigma_grid.iter().any(|m| !(*m > 0.0))
        {
            return Err(invalid("bandwidth and grid multipliers must be positive"));
        }
        Ok(())
    }
}

pub fn fit(
    kind: ScorerKind,
    domain: &DomainBox,
    data: &ExpertDataset,
    neg: &NegativeSet,
    cfg: &TrainConfig,
) -> Result<ScorerModel> {
    let (neg_train, neg_hold) = neg.halves();
    fit_split(
        kind,
        domain,
        &data.train(),
        &data.holdout(),
        neg_train,
        neg_hold,
        cfg,
    )
}

/// Fit on explicit splits. Used directly by refits that augment one split.
pub fn fit_split(
    kind: ScorerKind,
    domain: &DomainBox,
    train: &[StateVec],
    hold: &[StateVec],
    neg_train: &[StateVec],
    neg_hold: &[StateVec],
    cfg: &TrainConfig,
) -> Result<ScorerModel> {
    cfg.validate()?;
    if train.len() < 10 {
        return Err(invalid("fit needs at least 10 training states"));
    }
    if hold.is_empty() || neg_hold.is_empty() {
        return Err(invalid("fit needs expert and negative holdout states"));
    }
    let mean_ext = domain.mean_extent();
    let sigma_for = |m: f64| -> Vec<f64> {
        (0..domain.dims)
            .map(|i| cfg.bandwidth * m * domain.extent(i) / mean_ext)
            .collect()
    };
    let candidates: Vec<ScorerModel> = match kind {
        ScorerKind::Rbf => {
            let mut anchors: Vec<Anchor> =
                train.iter().map(|s| Anchor::new(s.clone(), 1.0)).collect();
            anchors.extend(neg_train.iter().map(|s| Anchor::new(s.clone(), -1.0)));
            cfg.sigma_grid
                .iter()
                .map(|m| ScorerModel {
                    domain: domain.clone(),
                    params: Params::Rbf {
                        sigma: sigma_for(*m),
                        anchors: anchors.clone(),
                        edits: vec![],
                    },
                    calibration: None,
                })
                .collect()
        }
        ScorerKind::Knn => {
            let anchors: Vec<Anchor> = train.iter().map(|s| Anchor::new(s.clone(), 1.0)).collect();
            let k = cfg.k.clamp(1, anchors.len());
            cfg.sigma_grid
                .iter()
                .map(|m| ScorerModel {
                    domain: domain.clone(),
                    params: Params::Knn {
                        k,
                        sigma_knn: cfg.bandwidth * m,
                        anchors: anchors.clone(),
                    },
                    calibration: None,
                })
                .collect()
        }
        ScorerKind::Recon => {
            let mut widths = vec![domain.dims];
            widths.extend(&cfg.hidden);
            widths.push(domain.dims);
            let mut mlp = Mlp::init(&widths, cfg.seed)?;
            let shell = ScorerModel {
                domain: domain.clone(),
                params: Params::Recon {
                    mlp: mlp.clone(),
                    tau: 1.0,
                },
                calibration: None,
            };
            let e: Vec<Vec<f64>> = train.iter().map(|s| shell.normalize(&s.values)).collect();
            let n: Vec<Vec<f64>> = neg_train
                .iter()
                .map(|s| shell.normalize(&s.values))
                .collect();
            recon::train(&mut mlp, &e, &n, cfg.margin, cfg.iterations, cfg.step);
            let errs: Vec<f64> = e.iter().map(|x| mlp.error(x)).collect();
            let tau = median(&errs).max(1e-12);
            vec![ScorerModel {
                domain: domain.clone(),
                params: Params::Recon { mlp, tau },
                calibration: None,
            }]
        }
    };
    let mut best: Option<(ScorerModel, f64)> = None;
    for mut m in candidates {
        m.calibrate(train)?;
        let c = contrast(&m, hold, neg_hold)?;
        if best.as_ref().is_none_or(|(_, b)| c > *b) {
            best = Some((m, c));
        }
    }
    let (model, c) = best.expect("at least one candidate");
    if !(c > 0.0) {
        return Err(Error::FitFailed(c));
    }
    Ok(model)
}

/// Members fitted on bootstrap resamples of the training split.
pub fn fit_ensemble(
    kind: ScorerKind,
    domain: &DomainBox,
    data: &ExpertDataset,
    neg: &NegativeSet,
    cfg: &TrainConfig,
) -> Result<Vec<ScorerModel>> {
    let train = data.train();
    let hold = data.holdout();
    let (neg_train, neg_hold) = neg.halves();
    par::map_range(cfg.ensemble, |e| {
        let mut rng = seeded(mix(cfg.seed, e as u64), stream::BOOTSTRAP);
        let boot: Vec<StateVec> = (0..train.len())
            .map(|_| train[rng.random_range(0..train.len())].clone())
            .collect();
        let mut c = cfg.clone();
        c.seed = mix(cfg.seed, e as u64);
        fit_split(kind, domain, &boot, &hold, neg_train, neg_hold, &c)
    })
    .into_iter()
    .collect()
}

pub fn add_anchor(model: &ScorerModel, a: Anchor) -> Result<ScorerModel> {
    if a.weight.abs() > W_MAX || !(a.scale > 0.0) {
        return Err(invalid(
            "anchor weight exceeds w_max or scale is not positive",
        ));
    }
    model.domain.check(&a.state)?;
    let mut out = model.clone();
    match &mut out.params {
        Params::Rbf { edits, .. } => edits.push(a),
        Params::Knn { anchors, .. } => anchors.push(a),
        Params::Recon { .. } => {
            return Err(Error::UnsupportedKind {
                kind: "recon".into(),
                what: "anchor edits; refit instead".into(),
            })
        }
    }
    Ok(out)
}

/// Population standard deviation of L(s) across ensemble members.
pub fn uncertainty(ensemble: &[ScorerModel], s: &[f64]) -> Result<f64> {
    if ensemble.len() < 2 {
        return Err(invalid("uncertainty needs at least two members"));
    }
    let kind = ensemble[0].kind();
    if ensemble.iter().any(|m| m.kind() != kind) {
        return Err(invalid("ensemble members have different kinds"));
    }
    let v = ensemble
        .iter()
        .map(|m| m.score(s))
        .collect::<Result<Vec<_>>>()?;
    let mu = mean(&v);
    Ok((v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyworld::{make_world, sample_expert, WorldSpec};

    fn unit_rbf(anchors: Vec<Anchor>) -> ScorerModel {
        ScorerModel::rbf(
            DomainBox::unit(2),
            anchors,
            vec![0.1, 0.1],
            Calibration { lo: 0.0, hi: 1.0 },
        )
        .unwrap()
    }

    #[test]
    fn single_anchor_scores_one_at_itself() {
        let m = unit_rbf(vec![Anchor::new(StateVec::new(vec![0.3, 0.3]), 1.0)]);
        assert_eq!(m.score(&[0.3, 0.3]).unwrap(), 1.0);
    }

    #[test]
    fn knn_k1_at_anchor_is_one() {
        let w = make_world(WorldSpec::preset("two-ridges").unwrap()).unwrap();
        let d = sample_expert(&w, 60, 0.25, 1).unwrap();
        let neg = sample_negatives(
            &w.domain,
            &d,
            &NegativeConfig {
                n: 80,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let cfg = TrainConfig {
            k: 1,
            bandwidth: 0.04,
            ..Default::default()
        };
        let m = fit(ScorerKind::Knn, &w.domain, &d, &neg, &cfg).unwrap();
        assert_eq!(m.score(&d.train()[3].values).unwrap(), 1.0);
    }

    #[test]
    fn negatives_respect_radius() {
        let w = make_world(WorldSpec::preset("two-ridges").unwrap()).unwrap();
        let d = sample_expert(&w, 50, 0.2, 2).unwrap();
        let cfg = NegativeConfig {
            n: 100,
            r_min: 0.05,
            ..Default::default()
        };
        let n = sample_negatives(&w.domain, &d, &cfg, 3).unwrap();
        assert_eq!(n.states.len(), 100);
        for s in &n.states {
            assert!(d.states.iter().all(|e| e.dist(s) >= 0.05));
        }
        let cfg = NegativeConfig {
            strategy: NegativeStrategy::Perturb,
            n: 50,
            r_min: 0.1,
            r_max: 0.1,
        };
        let p = sample_negatives(&w.domain, &d, &cfg, 3).unwrap();
        for (s, i) in p.states.iter().zip(&p.sources) {
            assert!((s.dist(&d.states[*i]) - 0.1).abs() < 1e-12);
        }
        assert!(sample_negatives(
            &w.domain,
            &d,
            &NegativeConfig {
                n: 0,
                ..Default::default()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn recon_refuses_anchor_edits() {
        let w = make_world(WorldSpec::preset("two-ridges").unwrap()).unwrap();
        let d = sample_expert(&w, 60, 0.25, 1).unwrap();
        let neg = sample_negatives(
            &w.domain,
            &d,
            &NegativeConfig {
                n: 80,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let cfg = TrainConfig {
            iterations: 200,
            ..Default::default()
        };
        let m = fit(ScorerKind::Recon, &w.domain, &d, &neg, &cfg).unwrap();
        let a = Anchor::new(StateVec::new(vec![0.5, 0.5]), -1.0);
        assert!(matches!(
            add_anchor(&m, a),
            Err(Error::UnsupportedKind { .. })
        ));
    }

    #[test]
    fn uncertainty_arithmetic() {
        let hi = unit_rbf(vec![Anchor::new(StateVec::new(vec![0.5, 0.5]), 1.0)]);
        let lo = unit_rbf(vec![Anchor::new(StateVec::new(vec![0.5, 0.5]), -1.0)]);
        assert_eq!(
            uncertainty(&[hi.clone(), hi.clone()], &[0.5, 0.5]).unwrap(),
            0.0
        );
        assert_eq!(uncertainty(&[hi.clone(), lo], &[0.5, 0.5]).unwrap(), 0.5);
        assert!(uncertainty(&[hi], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn too_few_training_states() {
        let w = make_world(WorldSpec::preset("two-ridges").unwrap()).unwrap();
        let mut d = sample_expert(&w, 10, 0.5, 1).unwrap();
        d.states.truncate(5);
        d.split.truncate(5);
        let neg = sample_negatives(
            &w.domain,
            &d,
            &NegativeConfig {
                n: 20,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        assert!(fit(
            ScorerKind::Rbf,
            &w.domain,
            &d,
            &neg,
            &TrainConfig::default()
        )
        .is_err());
    }
}
