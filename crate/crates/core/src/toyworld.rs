//! Bounded continuous test domains with exact safe regions, a seeded expert
//! generator and Monte-Carlo estimates of reward mass on unsafe states.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::par;
use crate::rng::{seeded, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVec {
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<BTreeMap<String, String>>,
}

impl StateVec {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            context: None,
        }
    }

    pub fn with_context(mut self, key: &str, value: &str) -> Self {
        self.context
            .get_or_insert_with(BTreeMap::new)
            .insert(key.to_string(), value.to_string());
        self
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn ctx(&self, key: &str) -> Option<&str> {
        self.context.as_ref()?.get(key).map(String::as_str)
    }

    pub fn dist(&self, other: &StateVec) -> f64 {
        dist(&self.values, &other.values)
    }
}

impl From<Vec<f64>> for StateVec {
    fn from(v: Vec<f64>) -> Self {
        StateVec::new(v)
    }
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist2(a, b).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub dims: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        let b = DomainBox {
            dims: lo.len(),
            lo,
            hi,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn unit(dims: usize) -> Self {
        DomainBox {
            dims,
            lo: vec![0.0; dims],
            hi: vec![1.0; dims],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 || self.lo.len() != self.dims || self.hi.len() != self.dims {
            return Err(invalid("domain bounds must have length dims > 0"));
        }
        for i in 0..self.dims {
            if !(self.lo[i].is_finite() && self.hi[i].is_finite() && self.lo[i] < self.hi[i]) {
                return Err(invalid(format!("domain bound {i}: lo must be < hi")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dims
            && p.iter()
                .enumerate()
                .all(|(i, v)| *v >= self.lo[i] && *v <= self.hi[i])
    }

    pub fn check(&self, s: &StateVec) -> Result<()> {
        if self.contains(&s.values) {
            Ok(())
        } else {
            Err(Error::OutOfDomain(s.values.clone()))
        }
    }

    pub fn extent(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    pub fn mean_extent(&self) -> f64 {
        (0..self.dims).map(|i| self.extent(i)).sum::<f64>() / self.dims as f64
    }

    pub fn diagonal(&self) -> f64 {
        (0..self.dims)
            .map(|i| self.extent(i).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn center(&self) -> Vec<f64> {
        (0..self.dims)
            .map(|i| 0.5 * (self.lo[i] + self.hi[i]))
            .collect()
    }

    pub fn volume(&self) -> f64 {
        (0..self.dims).map(|i| self.extent(i)).product()
    }

    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dims)
            .map(|i| rng.random_range(self.lo[i]..=self.hi[i]))
            .collect()
    }

    pub fn clamp(&self, p: &mut [f64]) {
        for (i, v) in p.iter_mut().enumerate() {
            *v = v.clamp(self.lo[i], self.hi[i]);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Region {
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    Capsule {
        a: Vec<f64>,
        b: Vec<f64>,
        radius: f64,
    },
}

fn segment_dist(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 == 0.0 {
        0.0
    } else {
        (p.iter()
            .zip(a)
            .zip(&ab)
            .map(|((p, a), d)| (p - a) * d)
            .sum::<f64>()
            / len2)
            .clamp(0.0, 1.0)
    };
    p.iter()
        .zip(a)
        .zip(&ab)
        .map(|((p, a), d)| (p - a - t * d).powi(2))
        .sum::<f64>()
        .sqrt()
}

impl Region {
    pub fn contains(&self, p: &[f64]) -> bool {
        match self {
            Region::Ball { center, radius } => dist(p, center) <= *radius,
            Region::Box { lo, hi } => p
                .iter()
                .enumerate()
                .all(|(i, v)| *v >= lo[i] && *v <= hi[i]),
            Region::Capsule { a, b, radius } => segment_dist(p, a, b) <= *radius,
        }
    }

    fn anchor_points(&self) -> Vec<&Vec<f64>> {
        match self {
            Region::Ball { center, .. } => vec![center],
            Region::Box { lo, hi } => vec![lo, hi],
            Region::Capsule { a, b, .. } => vec![a, b],
        }
    }

    fn validate(&self, domain: &DomainBox) -> Result<()> {
        for p in self.anchor_points() {
            if p.len() != domain.dims {
                return Err(invalid("region dimension does not match domain"));
            }
            if !domain.contains(p) {
                return Err(invalid(format!(
                    "region point {p:?} lies outside the domain"
                )));
            }
        }
        match self {
            Region::Ball { radius, .. } | Region::Capsule { radius, .. } if !(*radius > 0.0) => {
                Err(invalid("region radius must be positive"))
            }
            Region::Box { lo, hi } if lo.iter().zip(hi).any(|(l, h)| l >= h) => {
                Err(invalid("region box bounds must be ordered"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub weight: f64,
}

/// Truncated Gaussian mixture attached to one safe region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionGenerator {
    pub region: usize,
    pub weight: f64,
    pub components: Vec<Component>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    #[serde(default)]
    pub name: String,
    pub domain: DomainBox,
    pub safe_regions: Vec<Region>,
    pub expert_generator: Vec<RegionGenerator>,
    #[serde(default)]
    pub seed: u64,
    /// Recommended kernel bandwidth for scorers trained on this world.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_bandwidth: Option<f64>,
    /// Sub-box where the interesting unsafe states live, for focused mass estimates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focus: Option<DomainBox>,
}

pub type ToyWorld = WorldSpec;

pub const TWO_RIDGES_BANDWIDTH: f64 = 0.04;
/// Where tests plant an extra reward bump in the planted-bump world's unsafe band.
pub const PLANTED_BUMP_CENTER: [f64; 2] = [0.7, 0.8];

impl WorldSpec {
    pub fn preset(name: &str) -> Result<WorldSpec> {
        match name {
            "two-ridges" => Ok(two_ridges()),
            "planted-bump" => Ok(planted_bump()),
            "unit-disk" => Ok(WorldSpec {
                name: "unit-disk".into(),
                domain: DomainBox::unit(2),
                safe_regions: vec![Region::Ball {
                    center: vec![0.5, 0.5],
                    radius: 0.2,
                }],
                expert_generator: vec![RegionGenerator {
                    region: 0,
                    weight: 1.0,
                    components: vec![Component {
                        mean: vec![0.5, 0.5],
                        std: vec![0.08, 0.08],
                        weight: 1.0,
                    }],
                }],
                seed: 0,
                kernel_bandwidth: None,
                focus: None,
            }),
            other => Err(invalid(format!("unknown preset `{other}`"))),
        }
    }

    pub fn dims(&self) -> usize {
        self.domain.dims
    }

    pub fn bandwidth(&self) -> f64 {
        self.kernel_bandwidth
            .unwrap_or(0.1 * self.domain.mean_extent())
    }
}

/// Two parallel expert ridges, each inside its own safe capsule. The capsules
/// leave a thin unsafe strip between the ridges which a smooth scorer bridges.
fn two_ridges() -> WorldSpec {
    let h = 1.5 * TWO_RIDGES_BANDWIDTH;
    let strip = 0.6 * TWO_RIDGES_BANDWIDTH;
    let radius = 0.1;
    let yc = strip / 2.0 + radius;
    let (x0, x1) = (0.35, 0.65);
    let ridge = |y: f64| -> Vec<Component> {
        let mut c: Vec<Component> = [0.38, 0.46, 0.54, 0.62]
            .iter()
            .map(|x| Component {
                mean: vec![*x, y],
                std: vec![0.035, 0.005],
                weight: 0.24,
            })
            .collect();
        let yy = if y < 0.5 { 0.5 - yc } else { 0.5 + yc };
        c.push(Component {
            mean: vec![0.5, yy],
            std: vec![0.15, 0.05],
            weight: 0.04,
        });
        c
    };
    WorldSpec {
        name: "two-ridges".into(),
        domain: DomainBox::unit(2),
        safe_regions: vec![
            Region::Capsule {
                a: vec![x0, 0.5 - yc],
                b: vec![x1, 0.5 - yc],
                radius,
            },
            Region::Capsule {
                a: vec![x0, 0.5 + yc],
                b: vec![x1, 0.5 + yc],
                radius,
            },
        ],
        expert_generator: vec![
            RegionGenerator {
                region: 0,
                weight: 0.5,
                components: ridge(0.5 - h),
            },
            RegionGenerator {
                region: 1,
                weight: 0.5,
                components: ridge(0.5 + h),
            },
        ],
        seed: 7,
        kernel_bandwidth: Some(TWO_RIDGES_BANDWIDTH),
        focus: Some(DomainBox {
            dims: 2,
            lo: vec![x0, 0.5 - h],
            hi: vec![x1, 0.5 + h],
        }),
    }
}

/// Safe lower band, unsafe upper band. Tests plant reward bumps in the upper band.
fn planted_bump() -> WorldSpec {
    WorldSpec {
        name: "planted-bump".into(),
        domain: DomainBox::unit(2),
        safe_regions: vec![Region::Box {
            lo: vec![0.0, 0.0],
            hi: vec![1.0, 0.6],
        }],
        expert_generator: vec![RegionGenerator {
            region: 0,
            weight: 1.0,
            components: vec![Component {
                mean: vec![0.5, 0.3],
                std: vec![0.2, 0.12],
                weight: 1.0,
            }],
        }],
        seed: 0,
        kernel_bandwidth: Some(0.05),
        focus: Some(DomainBox {
            dims: 2,
            lo: vec![0.0, 0.6],
            hi: vec![1.0, 1.0],
        }),
    }
}

pub fn make_world(spec: WorldSpec) -> Result<ToyWorld> {
    spec.domain.validate()?;
    if !(2..=3).contains(&spec.domain.dims) {
        return Err(invalid("only 2-D and 3-D domains are supported"));
    }
    if spec.safe_regions.is_empty() {
        return Err(invalid("at least one safe region is required"));
    }
    for r in &spec.safe_regions {
        r.validate(&spec.domain)?;
    }
    for g in &spec.expert_generator {
        let region = spec
            .safe_regions
            .get(g.region)
            .ok_or_else(|| invalid(format!("generator refers to missing region {}", g.region)))?;
        if !(g.weight > 0.0) || g.components.is_empty() {
            return Err(invalid(
                "generator weight must be positive with at least one component",
            ));
        }
        for c in &g.components {
            if c.mean.len() != spec.domain.dims || c.std.len() != spec.domain.dims {
                return Err(invalid("component dimension does not match domain"));
            }
            if !region.contains(&c.mean) {
                return Err(invalid(format!(
                    "generator mean {:?} is outside its region",
                    c.mean
                )));
            }
            if c.std.iter().any(|s| !(*s > 0.0)) || !(c.weight > 0.0) {
                return Err(invalid("component std and weight must be positive"));
            }
        }
    }
    if let Some(f) = &spec.focus {
        f.validate()?;
    }
    Ok(spec)
}

pub fn is_safe(world: &ToyWorld, s: &StateVec) -> Result<bool> {
    world.domain.check(s)?;
    Ok(world.safe_regions.iter().any(|r| r.contains(&s.values)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertDataset {
    pub states: Vec<StateVec>,
    pub split: Vec<Split>,
    #[serde(default)]
    pub provenance: String,
}

impl ExpertDataset {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    fn select(&self, which: Split) -> Vec<StateVec> {
        self.states
            .iter()
            .zip(&self.split)
            .filter(|(_, s)| **s == which)
            .map(|(x, _)| x.clone())
            .collect()
    }

    pub fn train(&self) -> Vec<StateVec> {
        self.select(Split::Train)
    }

    pub fn holdout(&self) -> Vec<StateVec> {
        self.select(Split::Holdout)
    }
}

fn pick<R: rand::Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

pub fn sample_expert(
    world: &ToyWorld,
    n: usize,
    holdout_frac: f64,
    seed: u64,
) -> Result<ExpertDataset> {
    if n < 10 {
        return Err(invalid("sample_expert needs n >= 10"));
    }
    if !(holdout_frac > 0.0 && holdout_frac <= 0.5) {
        return Err(invalid("holdout_frac must lie in (0, 0.5]"));
    }
    if world.expert_generator.is_empty() {
        return Err(invalid("world has no expert generator"));
    }
    let mut rng = seeded(seed, stream::EXPERT);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let gen_w: Vec<f64> = world.expert_generator.iter().map(|g| g.weight).collect();
    let cap = 1000 * n;
    let mut attempts = 0;
    let mut states = Vec::with_capacity(n);
    while states.len() < n {
        if attempts >= cap {
            return Err(Error::Exhausted {
                what: "expert rejection sampling".into(),
                attempts,
            });
        }
        attempts += 1;
        let g = &world.expert_generator[pick(&mut rng, &gen_w)];
        let comp_w: Vec<f64> = g.components.iter().map(|c| c.weight).collect();
        let c = &g.components[pick(&mut rng, &comp_w)];
        let p: Vec<f64> = c
            .mean
            .iter()
            .zip(&c.std)
            .map(|(m, s)| m + s * std_normal.sample(&mut rng))
            .collect();
        if world.domain.contains(&p) && world.safe_regions[g.region].contains(&p) {
            states.push(StateVec::new(p));
        }
    }
    let n_hold = ((n as f64) * holdout_frac).round().max(1.0) as usize;
    let split = (0..n)
        .map(|i| {
            if i < n - n_hold {
                Split::Train
            } else {
                Split::Holdout
            }
        })
        .collect();
    Ok(ExpertDataset {
        states,
        split,
        provenance: format!("{} seed={seed} n={n} holdout={holdout_frac}", world.name),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_unsafe: usize,
}

/// Monte-Carlo mean of `reward` over uniform draws that the oracle calls unsafe.
/// Draws come from `focus` when given, otherwise from the whole domain.
pub fn unsafe_mass_with<F>(
    world: &ToyWorld,
    reward: F,
    n_mc: usize,
    seed: u64,
    focus: Option<&DomainBox>,
) -> Result<MassEstimate>
where
    F: Fn(&StateVec) -> f64 + Sync + Send,
{
    if n_mc < 1000 {
        return Err(invalid("n_mc must be at least 1000"));
    }
    let region = focus.unwrap_or(&world.domain);
    let mut rng = seeded(seed, stream::MC);
    let draws: Vec<StateVec> = (0..n_mc)
        .map(|_| StateVec::new(region.sample(&mut rng)))
        .collect();
    let unsafe_pts: Vec<StateVec> = draws
        .into_iter()
        .filter(|s| {
            world.domain.contains(&s.values)
                && !world.safe_regions.iter().any(|r| r.contains(&s.values))
        })
        .collect();
    if unsafe_pts.is_empty() {
        return Err(Error::Exhausted {
            what: "no unsafe state among Monte-Carlo draws".into(),
            attempts: n_mc,
        });
    }
    let vals = par::map(&unsafe_pts, |s| reward(s));
    Ok(summarize(&vals))
}

pub(crate) fn summarize(vals: &[f64]) -> MassEstimate {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = if vals.len() > 1 {
        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    MassEstimate {
        mean,
        stderr: (var / n).sqrt(),
        n_unsafe: vals.len(),
    }
}

pub fn unsafe_reward_mass(
    world: &ToyWorld,
    artifact: &crate::RewardArtifact,
    n_mc: usize,
    seed: u64,
) -> Result<MassEstimate> {
    unsafe_mass_with(world, |s| artifact.reward_or_zero(s, 0), n_mc, seed, None)
}

pub fn write_dataset_csv<W: Write>(data: &ExpertDataset, out: W) -> Result<()> {
    let d = data.states.first().map(StateVec::dim).unwrap_or(0);
    let ctx_keys: Vec<String> = {
        let mut k: Vec<String> = data
            .states
            .iter()
            .filter_map(|s| s.context.as_ref())
            .flat_map(|c| c.keys().cloned())
            .collect();
        k.sort();
        k.dedup();
        k
    };
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    header.extend(ctx_keys.iter().map(|k| format!("ctx_{k}")));
    header.push("split".into());
    w.write_record(&header)
        .map_err(|e| Error::Data(e.to_string()))?;
    for (s, sp) in data.states.iter().zip(&data.split) {
        let mut row: Vec<String> = s.values.iter().map(|v| v.to_string()).collect();
        row.extend(ctx_keys.iter().map(|k| s.ctx(k).unwrap_or("").to_string()));
        row.push(match sp {
            Split::Train => "train".into(),
            Split::Holdout => "holdout".into(),
        });
        w.write_record(&row)
            .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv<R: Read>(input: R) -> Result<ExpertDataset> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| Error::Data(e.to_string()))?.clone();
    let mut xs = Vec::new();
    let mut ctx = Vec::new();
    let mut split_col = None;
    for (i, h) in header.iter().enumerate() {
        if let Some(k) = h.strip_prefix("ctx_") {
            ctx.push((i, k.to_string()));
        } else if h == "split" {
            split_col = Some(i);
        } else if let Some(j) = h.strip_prefix('x').and_then(|j| j.parse::<usize>().ok()) {
            xs.push((j, i));
        } else {
            return Err(Error::Data(format!("unexpected column `{h}`")));
        }
    }
    xs.sort();
    if xs.is_empty() || xs.iter().enumerate().any(|(k, (j, _))| k != *j) {
        return Err(Error::Data("coordinate columns must be x0..x{d-1}".into()));
    }
    let split_col = split_col.ok_or_else(|| Error::Data("missing `split` column".into()))?;
    let mut data = ExpertDataset {
        states: vec![],
        split: vec![],
        provenance: "csv".into(),
    };
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Data(e.to_string()))?;
        let values = xs
            .iter()
            .map(|(_, i)| {
                rec[*i]
                    .parse::<f64>()
                    .map_err(|e| Error::Data(format!("bad number: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut s = StateVec::new(values);
        for (i, k) in &ctx {
            if !rec[*i].is_empty() {
                s = s.with_context(k, &rec[*i]);
            }
        }
        data.split.push(match &rec[split_col] {
            "train" => Split::Train,
            "holdout" => Split::Holdout,
            other => return Err(Error::Data(format!("bad split `{other}`"))),
        });
        data.states.push(s);
    }
    Ok(data)
}
