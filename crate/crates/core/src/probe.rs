//! Gradient-correlation probes over the shared trunk, and a numeric check of
//! the one-step descent guarantee on quadratic losses.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{tree_sum, ParamVector, Tensor};

/// Inner product and cosine between main and aux trunk gradients at one
/// sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairCorrelation {
    pub inner: f64,
    pub cosine: f64,
    /// Set when either gradient is exactly zero; the cosine is then 0.
    pub degenerate: bool,
}

/// Cosine with the zero-gradient convention: 0 and flagged degenerate.
pub fn cosine_of(a: &ParamVector, b: &ParamVector) -> Result<PairCorrelation> {
    let inner = a.dot(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(PairCorrelation {
            inner,
            cosine: 0.0,
            degenerate: true,
        });
    }
    Ok(PairCorrelation {
        inner,
        cosine: (inner / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

pub fn pair_correlation(model: &Model, x: &Tensor, y: usize) -> Result<PairCorrelation> {
    let gm = model.main_loss_grad(x, y)?;
    let gs = model.aux_loss_grad(x)?;
    cosine_of(&gm.grad_s, &gs.grad_s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProbeMode {
    /// Main and aux gradients at the same sample, with a label for `x`.
    Pair,
    /// Main gradient at each seen sample against main gradient at `x*`.
    HistMainMain,
    /// Aux gradient at each seen sample against aux gradient at `x*`.
    HistAuxAux,
    /// Main against aux gradient at each seen sample; `x*` unused.
    HistMainAux,
}

impl ProbeMode {
    pub const ALL: [ProbeMode; 4] = [
        ProbeMode::Pair,
        ProbeMode::HistMainMain,
        ProbeMode::HistAuxAux,
        ProbeMode::HistMainAux,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeMode::Pair => "pair",
            ProbeMode::HistMainMain => "hist_main_main",
            ProbeMode::HistAuxAux => "hist_aux_aux",
            ProbeMode::HistMainAux => "hist_main_aux",
        }
    }
}

impl fmt::Display for ProbeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProbeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProbeMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown probe mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationReport {
    pub mode: ProbeMode,
    pub n: usize,
    pub mean_inner: f64,
    pub mean_cosine: f64,
    /// Standard error of the mean inner product.
    pub stderr: f64,
}

impl CorrelationReport {
    /// Aggregates per-sample values with a fixed pairwise reduction.
    pub fn from_samples(mode: ProbeMode, inners: &[f64], cosines: &[f64]) -> Result<Self> {
        let n = inners.len();
        if n == 0 || cosines.len() != n {
            return Err(Error::Input("correlation report needs at least one sample".into()));
        }
        let mean_inner = tree_sum(inners) / n as f64;
        let mean_cosine = tree_sum(cosines) / n as f64;
        let stderr = if n > 1 {
            let dev: Vec<f64> = inners.iter().map(|v| (v - mean_inner).powi(2)).collect();
            (tree_sum(&dev) / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        Ok(CorrelationReport {
            mode,
            n,
            mean_inner,
            mean_cosine,
            stderr,
        })
    }

    /// True when the mean is nonzero by more than `k` standard errors.
    pub fn significant(&self, k: f64) -> bool {
        self.mean_inner.abs() > k * self.stderr
    }
}

/// Trunk gradients of the seen samples, computed once and reused against
/// many probe points.
pub struct HistoricalProbe<'a> {
    model: &'a Model,
    main: Vec<ParamVector>,
    aux: Vec<ParamVector>,
}

impl<'a> HistoricalProbe<'a> {
    pub fn new(model: &'a Model, seen: &[LabeledImage]) -> Result<Self> {
        if seen.is_empty() {
            return Err(Error::Input("historical correlation needs a nonempty sample".into()));
        }
        let mut main = Vec::with_capacity(seen.len());
        let mut aux = Vec::with_capacity(seen.len());
        for s in seen {
            main.push(model.main_loss_grad(&s.pixels, s.label)?.grad_s);
            aux.push(model.aux_loss_grad(&s.pixels)?.grad_s);
        }
        Ok(HistoricalProbe { model, main, aux })
    }

    pub fn len(&self) -> usize {
        self.main.len()
    }

    pub fn is_empty(&self) -> bool {
        self.main.is_empty()
    }

    /// Report for one probe point. `x_star` is ignored by the main-aux mode;
    /// the main-main mode needs its label.
    pub fn report(&self, x_star: Option<(&Tensor, Option<usize>)>, mode: ProbeMode) -> Result<CorrelationReport> {
        let (seen, other): (&[ParamVector], ParamVector) = match mode {
            ProbeMode::HistMainAux => {
                let (mut inners, mut cosines) = (Vec::new(), Vec::new());
                for (m, a) in self.main.iter().zip(&self.aux) {
                    let c = cosine_of(m, a)?;
                    inners.push(c.inner);
                    cosines.push(c.cosine);
                }
                return CorrelationReport::from_samples(mode, &inners, &cosines);
            }
            ProbeMode::HistAuxAux => {
                let (x, _) = x_star.ok_or_else(|| Error::Input("hist_aux_aux needs a probe input".into()))?;
                (&self.aux, self.model.aux_loss_grad(x)?.grad_s)
            }
            ProbeMode::HistMainMain => {
                let (x, y) = x_star.ok_or_else(|| Error::Input("hist_main_main needs a probe input".into()))?;
                let y = y.ok_or_else(|| Error::Input("hist_main_main needs a label for the probe input".into()))?;
                (&self.main, self.model.main_loss_grad(x, y)?.grad_s)
            }
            ProbeMode::Pair => {
                let (x, y) = x_star.ok_or_else(|| Error::Input("pair mode needs an input".into()))?;
                let y = y.ok_or_else(|| Error::Input("pair mode needs a label".into()))?;
                let c = pair_correlation(self.model, x, y)?;
                return CorrelationReport::from_samples(mode, &[c.inner], &[c.cosine]);
            }
        };
        let (mut inners, mut cosines) = (Vec::with_capacity(seen.len()), Vec::with_capacity(seen.len()));
        for g in seen {
            let c = cosine_of(g, &other)?;
            inners.push(c.inner);
            cosines.push(c.cosine);
        }
        CorrelationReport::from_samples(mode, &inners, &cosines)
    }
}

/// Probes many points against the same history and aggregates the
/// per-point means: the result's `n` counts points, not seen samples.
pub fn probe_points(
    probe: &HistoricalProbe<'_>,
    points: &[(&Tensor, Option<usize>)],
    mode: ProbeMode,
) -> Result<CorrelationReport> {
    let (mut inners, mut cosines) = (Vec::with_capacity(points.len()), Vec::with_capacity(points.len()));
    for &(x, y) in points {
        let r = probe.report(Some((x, y)), mode)?;
        inners.push(r.mean_inner);
        cosines.push(r.mean_cosine);
    }
    CorrelationReport::from_samples(mode, &inners, &cosines)
}

/// One-shot form of [`HistoricalProbe::report`].
pub fn historical_correlation(
    model: &Model,
    seen: &[LabeledImage],
    x_star: Option<(&Tensor, Option<usize>)>,
    mode: ProbeMode,
) -> Result<CorrelationReport> {
    if mode == ProbeMode::HistMainMain && !matches!(x_star, Some((_, Some(_)))) {
        return Err(Error::Input("hist_main_main needs a label for the probe input".into()));
    }
    HistoricalProbe::new(model, seen)?.report(x_star, mode)
}

/// Quadratic pair `l_m = |θ - a|²/2`, `l_s = |θ - b|²/2` on a ball of
/// radius `radius` around the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct Theorem1Instance {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub radius: f64,
    pub epsilon: f64,
}

/// Test-time learning rate as a function of `ε`, `β` and `G`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepRule {
    /// `η = ε / (β G)`.
    EpsOverBetaG,
    /// `η = ε / (β G²)`, for which descent holds for any `G`.
    EpsOverBetaGSquared,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

impl Theorem1Instance {
    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn beta(&self) -> f64 {
        1.0
    }

    /// Gradient-norm bound over the ball: `R + max(|a|, |b|)`.
    pub fn gradient_bound(&self) -> f64 {
        self.radius + norm(&self.a).max(norm(&self.b))
    }

    pub fn eta(&self, rule: StepRule) -> f64 {
        let g = self.gradient_bound();
        match rule {
            StepRule::EpsOverBetaG => self.epsilon / (self.beta() * g),
            StepRule::EpsOverBetaGSquared => self.epsilon / (self.beta() * g * g),
        }
    }

    pub fn main_loss(&self, theta: &[f64]) -> f64 {
        0.5 * norm(&sub(theta, &self.a)).powi(2)
    }

    fn validate(&self) -> Result<()> {
        if self.a.is_empty() || self.a.len() != self.b.len() {
            return Err(Error::Input("targets must be nonempty and of equal dimension".into()));
        }
        if !(self.radius >= 0.0 && self.epsilon > 0.0) {
            return Err(Error::Input("radius must be >= 0 and epsilon > 0".into()));
        }
        Ok(())
    }

    /// Checks that `θ` lies where the gradient bound holds.
    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::Input(format!(
                "theta has dimension {}, instance has {}",
                theta.len(),
                self.dim()
            )));
        }
        let g = self.gradient_bound();
        let worst = norm(&sub(theta, &self.a)).max(norm(&sub(theta, &self.b)));
        if worst > g * (1.0 + 1e-12) {
            return Err(Error::Input(format!(
                "theta is outside the domain: gradient norm {worst} exceeds the bound {g}"
            )));
        }
        Ok(())
    }

    /// A single premise/step evaluation at `θ`.
    pub fn trial(&self, theta: &[f64], rule: StepRule) -> Result<Trial> {
        self.check_theta(theta)?;
        let gm = sub(theta, &self.a);
        let gs = sub(theta, &self.b);
        let inner = dot(&gm, &gs);
        let premise = inner > self.epsilon;
        let eta = self.eta(rule);
        let stepped: Vec<f64> = theta.iter().zip(&gs).map(|(t, g)| t - eta * g).collect();
        let before = self.main_loss(theta);
        let after = self.main_loss(&stepped);
        Ok(Trial {
            inner,
            premise,
            loss_before: before,
            loss_after: after,
            decreased: after < before,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trial {
    pub inner: f64,
    pub premise: bool,
    pub loss_before: f64,
    pub loss_after: f64,
    pub decreased: bool,
}

impl Trial {
    /// Premise held but the main loss did not go down.
    pub fn violation(&self) -> bool {
        self.premise && !self.decreased
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Theorem1Report {
    pub trials: Vec<Trial>,
    pub premise_count: usize,
    pub violations: usize,
}

fn uniform_in_ball(rng: &mut impl Rng, d: usize, r: f64) -> Vec<f64> {
    let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm(&dir);
    let scale = r * rng.random::<f64>().powf(1.0 / d as f64) / if n > 0.0 { n } else { 1.0 };
    dir.into_iter().map(|v| v * scale).collect()
}

/// Runs trial 0 at `theta` and `trials - 1` more at seeded uniform points of
/// the ball, counting premise-true trials whose main loss failed to drop.
pub fn verify_theorem1(
    instance: &Theorem1Instance,
    theta: &[f64],
    trials: usize,
    seed: u64,
    rule: StepRule,
) -> Result<Theorem1Report> {
    instance.validate()?;
    if trials == 0 {
        return Err(Error::Input("need at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    out.push(instance.trial(theta, rule)?);
    for _ in 1..trials {
        let t = uniform_in_ball(&mut rng, instance.dim(), instance.radius);
        out.push(instance.trial(&t, rule)?);
    }
    Ok(Theorem1Report {
        premise_count: out.iter().filter(|t| t.premise).count(),
        violations: out.iter().filter(|t| t.violation()).count(),
        trials: out,
    })
}

/// Seeded instance with targets drawn uniformly from the ball of radius
/// `target_radius`.
pub fn random_instance(rng: &mut impl Rng, d: usize, target_radius: f64, radius: f64, epsilon: f64) -> Theorem1Instance {
    Theorem1Instance {
        a: uniform_in_ball(rng, d, target_radius),
        b: uniform_in_ball(rng, d, target_radius),
        radius,
        epsilon,
    }
}
