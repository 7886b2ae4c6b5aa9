//! Scenario generation: ground-truth target worlds drawn from Gaussian
//! mixtures and agent priors built by perturbing the true density.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{kl_divergence, Cell, GridDims, ProbField, WorldMap};

/// Upper bound on mixture size accepted by [`GmmSpec::validate`].
pub const K_MAX: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    /// Meters.
    pub mean: [f64; 2],
    /// Per-axis variance in m².
    pub var: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub components: Vec<GmmComponent>,
}

impl GmmSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.components.len();
        if k == 0 || k > K_MAX {
            return Err(Error::InvalidArgument(format!(
                "mixture must have 1..={K_MAX} components, has {k}"
            )));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights sum to {total}"
            )));
        }
        if self
            .components
            .iter()
            .any(|c| c.weight < 0.0 || c.var[0] <= 0.0 || c.var[1] <= 0.0)
        {
            return Err(Error::InvalidArgument(
                "mixture weights must be non-negative and variances positive".into(),
            ));
        }
        Ok(())
    }

    pub fn density(&self, x: f64, y: f64) -> f64 {
        self.components
            .iter()
            .map(|c| {
                let dx = x - c.mean[0];
                let dy = y - c.mean[1];
                let e = -0.5 * (dx * dx / c.var[0] + dy * dy / c.var[1]);
                c.weight * e.exp() / (std::f64::consts::TAU * (c.var[0] * c.var[1]).sqrt())
            })
            .sum()
    }
}

/// Ways of corrupting the true density into the agent's prior. Applied in
/// list order; `ShiftCenters` re-rasterizes from the (shifted) mixture and so
/// discards anything applied before it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum PriorPerturbation {
    ShiftCenters { delta: f64 },
    MixNoise { weight: f64, noise: GmmSpec },
    CellNoise { sigma: f64 },
}

impl PriorPerturbation {
    pub fn validate(&self) -> Result<()> {
        match self {
            PriorPerturbation::ShiftCenters { delta } if *delta < 0.0 => Err(
                Error::InvalidArgument(format!("shift magnitude {delta} is negative")),
            ),
            PriorPerturbation::MixNoise { weight, noise } => {
                if !(0.0..=1.0).contains(weight) {
                    return Err(Error::InvalidArgument(format!(
                        "mix weight {weight} outside [0, 1]"
                    )));
                }
                noise.validate()
            }
            PriorPerturbation::CellNoise { sigma } if *sigma < 0.0 => Err(
                Error::InvalidArgument(format!("cell noise sigma {sigma} is negative")),
            ),
            _ => Ok(()),
        }
    }
}

fn uniform_in<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Random mixture: `k` uniform in `k_range` (inclusive), means uniform over
/// the map, per-axis variances uniform in `var_range`, Dirichlet(1) weights.
pub fn sample_gmm_spec<R: Rng + ?Sized>(
    rng: &mut R,
    dims: &GridDims,
    k_range: (usize, usize),
    var_range: (f64, f64),
) -> Result<GmmSpec> {
    if k_range.0 == 0 || k_range.0 > k_range.1 || k_range.1 > K_MAX {
        return Err(Error::InvalidArgument(format!(
            "bad component range {k_range:?}"
        )));
    }
    if !(var_range.0 > 0.0 && var_range.0 <= var_range.1) {
        return Err(Error::InvalidArgument(format!(
            "bad variance range {var_range:?}"
        )));
    }
    let k = rng.random_range(k_range.0..=k_range.1);
    let w = dims.width as f64 * dims.cell_size;
    let h = dims.height as f64 * dims.cell_size;
    let mut comps = Vec::with_capacity(k);
    for _ in 0..k {
        let mean = [uniform_in(rng, 0.0, w), uniform_in(rng, 0.0, h)];
        let var = [
            uniform_in(rng, var_range.0, var_range.1),
            uniform_in(rng, var_range.0, var_range.1),
        ];
        let g: f64 = Exp1.sample(rng);
        comps.push(GmmComponent {
            weight: g,
            mean,
            var,
        });
    }
    let total: f64 = comps.iter().map(|c| c.weight).sum();
    for c in &mut comps {
        c.weight /= total;
    }
    Ok(GmmSpec { components: comps })
}

/// Mixture density at cell centers, rescaled affinely onto `[p_lo, p_hi]`.
pub fn rasterize(spec: &GmmSpec, dims: &GridDims, p_lo: f64, p_hi: f64) -> Result<ProbField> {
    if !(0.0 < p_lo && p_lo < p_hi && p_hi < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < p_lo < p_hi < 1, got {p_lo}, {p_hi}"
        )));
    }
    let cs = dims.cell_size;
    let mut values = Vec::with_capacity(dims.len());
    for y in 0..dims.height {
        for x in 0..dims.width {
            values.push(spec.density((x as f64 + 0.5) * cs, (y as f64 + 0.5) * cs));
        }
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        let scale = (p_hi - p_lo) / (hi - lo);
        for v in &mut values {
            *v = (p_lo + (*v - lo) * scale).clamp(p_lo, p_hi);
        }
    } else {
        values.fill(0.5 * (p_lo + p_hi));
    }
    ProbField::new(*dims, values)
}

fn meters_to_cell(v: f64, cell_size: f64, n: usize) -> usize {
    let c = (v / cell_size).floor();
    if c < 0.0 {
        0
    } else {
        (c as usize).min(n - 1)
    }
}

/// Draws one cell from the mixture (component, then Gaussian), clipped.
pub fn sample_cell<R: Rng + ?Sized>(spec: &GmmSpec, dims: &GridDims, rng: &mut R) -> Cell {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut chosen = spec.components.len() - 1;
    for (i, c) in spec.components.iter().enumerate() {
        acc += c.weight;
        if u < acc {
            chosen = i;
            break;
        }
    }
    let c = &spec.components[chosen];
    let zx: f64 = StandardNormal.sample(rng);
    let zy: f64 = StandardNormal.sample(rng);
    let x = c.mean[0] + zx * c.var[0].sqrt();
    let y = c.mean[1] + zy * c.var[1].sqrt();
    (
        meters_to_cell(x, dims.cell_size, dims.width),
        meters_to_cell(y, dims.cell_size, dims.height),
    )
}

/// Places `n` targets; a duplicate draw is retried up to 100 times and then
/// accepted, so the world holds between 1 and `n` distinct targets.
pub fn sample_targets<R: Rng + ?Sized>(
    spec: &GmmSpec,
    n: usize,
    dims: &GridDims,
    rng: &mut R,
) -> Result<WorldMap> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one target".into()));
    }
    spec.validate()?;
    let mut world = WorldMap::empty(*dims);
    for _ in 0..n {
        let mut cell = sample_cell(spec, dims, rng);
        for _ in 0..100 {
            if !world.is_occupied(cell)? {
                break;
            }
            cell = sample_cell(spec, dims, rng);
        }
        let i = dims.index(cell)?;
        world.occupied[i] = true;
    }
    Ok(world)
}

/// Applies `perturbations` in order, starting from `field` (the rasterized
/// `spec`).
pub fn perturb<R: Rng + ?Sized>(
    spec: &GmmSpec,
    field: &ProbField,
    perturbations: &[PriorPerturbation],
    p_lo: f64,
    p_hi: f64,
    rng: &mut R,
) -> Result<ProbField> {
    let dims = field.dims;
    let mut out = field.clone();
    for p in perturbations {
        p.validate()?;
        match p {
            PriorPerturbation::ShiftCenters { delta } => {
                let mut shifted = spec.clone();
                for c in &mut shifted.components {
                    let theta = rng.random_range(0.0..std::f64::consts::TAU);
                    c.mean[0] += delta * theta.cos();
                    c.mean[1] += delta * theta.sin();
                }
                out = rasterize(&shifted, &dims, p_lo, p_hi)?;
            }
            PriorPerturbation::MixNoise { weight, noise } => {
                let n = rasterize(noise, &dims, p_lo, p_hi)?;
                if *weight == 1.0 {
                    out = n;
                } else {
                    for (o, v) in out.values.iter_mut().zip(&n.values) {
                        *o = (1.0 - weight) * *o + weight * v;
                    }
                }
            }
            PriorPerturbation::CellNoise { sigma } => {
                for o in &mut out.values {
                    let z: f64 = StandardNormal.sample(rng);
                    *o = (*o + sigma * z).clamp(p_lo, p_hi);
                }
            }
        }
    }
    Ok(out)
}

/// Range of a sampled perturbation magnitude; a zero upper bound disables
/// the perturbation entirely.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeRange {
    pub lo: f64,
    pub hi: f64,
}

impl MagnitudeRange {
    pub const OFF: MagnitudeRange = MagnitudeRange { lo: 0.0, hi: 0.0 };

    pub fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn enabled(&self) -> bool {
        self.hi > 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    /// Inclusive range of mixture sizes.
    pub k_range: (usize, usize),
    pub var_range: (f64, f64),
    /// Inclusive range of target counts.
    pub n_targets: (usize, usize),
    pub p_lo: f64,
    pub p_hi: f64,
    /// Meters.
    pub shift: MagnitudeRange,
    pub mix_weight: MagnitudeRange,
    pub cell_sigma: MagnitudeRange,
    /// Random axis-aligned obstacle rectangles.
    pub obstacle_count: usize,
    pub obstacle_max_side: usize,
    /// Cell no obstacle may cover, usually the episode start cell.
    pub keep_clear: Option<Cell>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            cell_size: 1.0,
            k_range: (2, 5),
            var_range: (4.0, 36.0),
            n_targets: (5, 10),
            p_lo: 0.05,
            p_hi: 0.8,
            shift: MagnitudeRange::OFF,
            mix_weight: MagnitudeRange::OFF,
            cell_sigma: MagnitudeRange::OFF,
            obstacle_count: 0,
            obstacle_max_side: 4,
            keep_clear: None,
        }
    }
}

impl ScenarioConfig {
    pub fn dims(&self) -> Result<GridDims> {
        GridDims::new(self.width, self.height, self.cell_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub spec: GmmSpec,
    pub perturbations: Vec<PriorPerturbation>,
    pub world: WorldMap,
    /// Rasterized true density.
    pub truth: ProbField,
    pub prior: ProbField,
    pub obstacles: Vec<bool>,
    /// `KL(truth || prior)` over normalized fields, in nats.
    pub kl: f64,
}

/// Generates a full scenario from `rng`.
pub fn scenario<R: Rng + ?Sized>(rng: &mut R, config: &ScenarioConfig) -> Result<Scenario> {
    let dims = config.dims()?;
    let spec = sample_gmm_spec(rng, &dims, config.k_range, config.var_range)?;
    let (nlo, nhi) = config.n_targets;
    if nlo == 0 || nlo > nhi {
        return Err(Error::InvalidArgument(format!(
            "bad target count range {:?}",
            config.n_targets
        )));
    }
    let n = rng.random_range(nlo..=nhi);
    let world = sample_targets(&spec, n, &dims, rng)?;
    let truth = rasterize(&spec, &dims, config.p_lo, config.p_hi)?;

    let mut perturbations = Vec::new();
    if config.shift.enabled() {
        perturbations.push(PriorPerturbation::ShiftCenters {
            delta: uniform_in(rng, config.shift.lo, config.shift.hi),
        });
    }
    if config.mix_weight.enabled() {
        let weight = uniform_in(rng, config.mix_weight.lo, config.mix_weight.hi);
        let noise = sample_gmm_spec(rng, &dims, config.k_range, config.var_range)?;
        perturbations.push(PriorPerturbation::MixNoise { weight, noise });
    }
    if config.cell_sigma.enabled() {
        perturbations.push(PriorPerturbation::CellNoise {
            sigma: uniform_in(rng, config.cell_sigma.lo, config.cell_sigma.hi),
        });
    }
    let prior = perturb(&spec, &truth, &perturbations, config.p_lo, config.p_hi, rng)?;
    let kl = kl_divergence(&truth, &prior)?;

    let mut obstacles = vec![false; dims.len()];
    for _ in 0..config.obstacle_count {
        let side = config.obstacle_max_side.max(1);
        // redraw rectangles over the kept cell; give up after a few tries
        let rect = (0..64).find_map(|_| {
            let w = rng.random_range(1..=side).min(dims.width);
            let h = rng.random_range(1..=side).min(dims.height);
            let x0 = rng.random_range(0..=dims.width - w);
            let y0 = rng.random_range(0..=dims.height - h);
            let covers = |(cx, cy): Cell| (x0..x0 + w).contains(&cx) && (y0..y0 + h).contains(&cy);
            (!config.keep_clear.is_some_and(covers)).then_some((x0, y0, w, h))
        });
        let Some((x0, y0, w, h)) = rect else { continue };
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                obstacles[y * dims.width + x] = true;
            }
        }
    }

    Ok(Scenario {
        seed: 0,
        spec,
        perturbations,
        world,
        truth,
        prior,
        obstacles,
        kl,
    })
}

impl Scenario {
    /// Deterministic scenario from a single 64-bit seed.
    pub fn from_seed(seed: u64, config: &ScenarioConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = scenario(&mut rng, config)?;
        s.seed = seed;
        Ok(s)
    }

    /// Single-file JSON dump; the prior is embedded in the grid CSV form.
    pub fn dump(&self) -> Result<String> {
        let v = serde_json::json!({
            "seed": self.seed,
            "spec": self.spec,
            "perturbations": self.perturbations,
            "targets": self.world.targets(),
            "kl": self.kl,
            "width": self.prior.dims.width,
            "height": self.prior.dims.height,
            "prior_csv": self.prior.to_csv(),
        });
        Ok(serde_json::to_string_pretty(&v)?)
    }
}
