//! Online test-time training: one auxiliary-loss step per stream item,
//! persistent adaptation, periodic frozen evaluation, and the two defenses
//! (confidence gate, gradient-correlation filter).

use std::fmt;

use crate::attacks::AttackStream;
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::model::{Model, ROTATIONS};
use crate::numerics::{argmax, ParamVector, Tensor};

/// Which partitions a test-time step moves. The main head never moves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateScope {
    SharedAndAux,
    SharedOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorrMode {
    Reject,
    Project,
}

impl fmt::Display for CorrMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorrMode::Reject => "reject",
            CorrMode::Project => "project",
        })
    }
}

/// Filter on the cosine between the new trunk gradient and an exponential
/// moving average of applied trunk gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrDefense {
    /// EMA decay, in `[0, 1)`.
    pub decay: f64,
    /// Cosine floor, in `[-1, 1]`.
    pub floor: f64,
    pub mode: CorrMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TTTPolicy {
    pub eta: f64,
    pub scope: UpdateScope,
    /// Skip the update when the mean top aux probability reaches this value.
    pub confidence_threshold: Option<f64>,
    pub corr_defense: Option<CorrDefense>,
    pub steps_per_instance: usize,
}

impl Default for TTTPolicy {
    fn default() -> Self {
        TTTPolicy {
            eta: 0.001,
            scope: UpdateScope::SharedAndAux,
            confidence_threshold: None,
            corr_defense: None,
            steps_per_instance: 1,
        }
    }
}

impl TTTPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Input(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if let Some(t) = self.confidence_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Input(format!("confidence threshold {t} outside [0, 1]")));
            }
        }
        if let Some(d) = &self.corr_defense {
            if !(0.0..1.0).contains(&d.decay) {
                return Err(Error::Input(format!("history decay {} outside [0, 1)", d.decay)));
            }
            if !(-1.0..=1.0).contains(&d.floor) {
                return Err(Error::Input(format!("cosine floor {} outside [-1, 1]", d.floor)));
            }
        }
        if self.steps_per_instance == 0 {
            return Err(Error::Input("steps per instance must be >= 1".into()));
        }
        Ok(())
    }

    /// Compact one-line description used in run metadata.
    pub fn summary(&self) -> String {
        let mut s = format!("eta={}", self.eta);
        s.push_str(match self.scope {
            UpdateScope::SharedAndAux => " scope=shared+aux",
            UpdateScope::SharedOnly => " scope=shared",
        });
        if let Some(t) = self.confidence_threshold {
            s.push_str(&format!(" confidence={t}"));
        }
        if let Some(d) = &self.corr_defense {
            s.push_str(&format!(" corr={}:decay={}:floor={}", d.mode, d.decay, d.floor));
        }
        if self.steps_per_instance != 1 {
            s.push_str(&format!(" steps={}", self.steps_per_instance));
        }
        s
    }
}

/// EMA of applied trunk gradients; empty until the first step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradHistory {
    pub ema: Option<ParamVector>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    Gated,
    Rejected,
    NonFinite,
}

impl StepOutcome {
    pub fn label(self) -> &'static str {
        match self {
            StepOutcome::Applied => "applied",
            StepOutcome::Gated => "gated",
            StepOutcome::Rejected => "rejected",
            StepOutcome::NonFinite => "nonfinite",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Aux loss before the update.
    pub aux_loss: f64,
    pub outcome: StepOutcome,
    /// Cosine against history, present when the correlation filter ran.
    pub cosine_history: Option<f64>,
    pub predicted_class: usize,
}

impl StepRecord {
    pub fn applied(&self) -> bool {
        self.outcome == StepOutcome::Applied
    }
}

/// Result of the correlation filter for one gradient.
#[derive(Clone, Debug)]
pub struct Filtered {
    /// Gradient to apply, or `None` when rejected.
    pub gradient: Option<ParamVector>,
    pub cosine: f64,
    pub history: ParamVector,
}

/// Compares `g` with history `h` and returns the accepted gradient (possibly
/// projected) together with the updated history
/// `h' = decay * h + (1 - decay) * g_applied`, where a rejection applies zero.
pub fn corr_reg_filter(g: &ParamVector, h: &ParamVector, defense: &CorrDefense) -> Result<Filtered> {
    let gh = g.dot(h)?;
    let (gn, hn) = (g.norm(), h.norm());
    let cosine = if hn == 0.0 || gn == 0.0 {
        1.0
    } else {
        (gh / (gn * hn)).clamp(-1.0, 1.0)
    };
    let gradient = if cosine >= defense.floor {
        Some(g.clone())
    } else {
        match defense.mode {
            CorrMode::Reject => None,
            CorrMode::Project => {
                let mut p = g.clone();
                if gh < 0.0 {
                    p.axpy(-gh / h.norm_sq(), h)?;
                }
                Some(p)
            }
        }
    };
    let mut history = h.clone();
    history.scale(defense.decay);
    if let Some(applied) = &gradient {
        history.axpy(1.0 - defense.decay, applied)?;
    }
    Ok(Filtered {
        gradient,
        cosine,
        history,
    })
}

/// Mean over the four rotations of the aux head's top probability.
fn mean_top_probability(probs: &Tensor) -> f64 {
    let rows: Vec<f64> = probs
        .data()
        .chunks(ROTATIONS)
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    rows.iter().sum::<f64>() / rows.len() as f64
}

/// One test-time adaptation on `x` followed by a main-task prediction with
/// the adapted parameters. Returns the class probabilities and a record.
pub fn ttt_step(
    model: &mut Model,
    x: &Tensor,
    policy: &TTTPolicy,
    history: &mut GradHistory,
    step: usize,
) -> Result<(Vec<f64>, StepRecord)> {
    let mut aux_loss = f64::NAN;
    let mut outcome = StepOutcome::Gated;
    let mut cosine_history = None;
    for inner in 0..policy.steps_per_instance {
        let grad = model.aux_loss_grad(x)?;
        if inner == 0 {
            aux_loss = grad.loss;
        }
        if !grad.loss.is_finite() || !grad.grad_s.is_finite() || !grad.grad_head.is_finite() {
            outcome = StepOutcome::NonFinite;
            break;
        }
        if let Some(t) = policy.confidence_threshold {
            if mean_top_probability(&grad.probs) >= t {
                if inner == 0 {
                    outcome = StepOutcome::Gated;
                }
                break;
            }
        }
        let trunk_grad = match &policy.corr_defense {
            None => Some(grad.grad_s),
            Some(defense) => {
                let h = history.ema.take().unwrap_or_else(|| grad.grad_s.zeros_like());
                let f = corr_reg_filter(&grad.grad_s, &h, defense)?;
                history.ema = Some(f.history);
                cosine_history = Some(f.cosine);
                f.gradient
            }
        };
        let Some(trunk_grad) = trunk_grad else {
            if inner == 0 {
                outcome = StepOutcome::Rejected;
            }
            break;
        };
        if policy.eta > 0.0 {
            model.trunk.axpy(-policy.eta, &trunk_grad)?;
            if policy.scope == UpdateScope::SharedAndAux {
                model.aux.axpy(-policy.eta, &grad.grad_head)?;
            }
        }
        outcome = StepOutcome::Applied;
    }
    let probs = model.predict_main(x)?;
    let record = StepRecord {
        step,
        aux_loss,
        outcome,
        cosine_history,
        predicted_class: argmax(&probs),
    };
    Ok((probs, record))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopCriterion {
    /// Stop once evaluation accuracy is at or below this value.
    pub accuracy: f64,
    pub max_steps: usize,
}

impl StopCriterion {
    /// Coin-flip accuracy plus 0.05, capped at 5000 steps.
    pub fn for_classes(num_classes: usize) -> Self {
        StopCriterion {
            accuracy: 1.0 / num_classes as f64 + 0.05,
            max_steps: 5000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub accuracy: f64,
    pub mean_main_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForgettingCurve {
    pub points: Vec<CurvePoint>,
    pub attack: String,
    pub seed: u64,
    pub policy: String,
}

impl ForgettingCurve {
    pub fn baseline(&self) -> Option<f64> {
        self.points.first().map(|p| p.accuracy)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.points.last().map(|p| p.accuracy)
    }

    /// First evaluated step whose accuracy is at or below `threshold`.
    pub fn steps_to(&self, threshold: f64) -> Option<usize> {
        self.points.iter().find(|p| p.accuracy <= threshold).map(|p| p.step)
    }
}

/// Adaptation state that persists across stream items.
#[derive(Clone, Debug)]
pub struct OnlineSession {
    pub model: Model,
    pub history: GradHistory,
    /// Number of stream items consumed so far.
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct OnlineRun {
    pub curve: ForgettingCurve,
    pub records: Vec<StepRecord>,
}

impl OnlineSession {
    pub fn new(model: Model) -> Self {
        OnlineSession {
            model,
            history: GradHistory::default(),
            step: 0,
        }
    }

    fn evaluate(&self, eval: &ImageSet) -> Result<CurvePoint> {
        let (accuracy, mean_main_loss) = self.model.evaluate(&eval.images)?;
        Ok(CurvePoint {
            step: self.step,
            accuracy,
            mean_main_loss,
        })
    }

    /// Feeds the stream until it ends, the step cap is hit, or an evaluation
    /// falls to the stop accuracy. Evaluations happen at the session's
    /// current step and at every later multiple of `interval`.
    pub fn run(
        &mut self,
        stream: &mut dyn AttackStream,
        eval: &ImageSet,
        interval: usize,
        stop: &StopCriterion,
        policy: &TTTPolicy,
        seed: u64,
    ) -> Result<OnlineRun> {
        if eval.is_empty() {
            return Err(Error::Input("evaluation set is empty".into()));
        }
        if interval == 0 {
            return Err(Error::Input("evaluation interval must be >= 1".into()));
        }
        policy.validate()?;
        let mut curve = ForgettingCurve {
            points: vec![self.evaluate(eval)?],
            attack: stream.name().to_string(),
            seed,
            policy: policy.summary(),
        };
        let mut records = Vec::new();
        let mut done = curve.points[0].accuracy <= stop.accuracy;
        while !done && self.step < stop.max_steps {
            let Some(item) = stream.next_item(&self.model)? else {
                break;
            };
            let (_, record) = ttt_step(&mut self.model, &item.pixels, policy, &mut self.history, self.step)?;
            records.push(record);
            self.step += 1;
            if self.step % interval == 0 {
                let point = self.evaluate(eval)?;
                done = point.accuracy <= stop.accuracy;
                curve.points.push(point);
            }
        }
        Ok(OnlineRun { curve, records })
    }
}

/// Runs a fresh session over `stream` and returns the curve, the adapted
/// model, and one record per consumed item.
pub fn run_online(
    model: Model,
    stream: &mut dyn AttackStream,
    eval: &ImageSet,
    interval: usize,
    stop: &StopCriterion,
    policy: &TTTPolicy,
    seed: u64,
) -> Result<(ForgettingCurve, Model, Vec<StepRecord>)> {
    let mut session = OnlineSession::new(model);
    let run = session.run(stream, eval, interval, stop, policy, seed)?;
    Ok((run.curve, session.model, run.records))
}
