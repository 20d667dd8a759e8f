//! Seeded sample streams fed to the online learner, behind a common trait
//! and a name-keyed registry.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{rotate90k, ImageSet, PixelStats};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;

/// One poisoning sample plus attacker-side metadata the learner never sees.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamItem {
    pub pixels: Tensor,
    pub source_label: Option<usize>,
    pub rotation: Option<usize>,
}

impl StreamItem {
    fn plain(pixels: Tensor) -> Self {
        StreamItem {
            pixels,
            source_label: None,
            rotation: None,
        }
    }
}

/// A deterministic, possibly model-dependent sequence of inputs.
pub trait AttackStream {
    fn name(&self) -> &str;

    /// Next item, crafted against `model` where the stream needs one.
    fn next_item(&mut self, model: &Model) -> Result<Option<StreamItem>>;
}

fn require_nonempty(set: &ImageSet, who: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Input(format!("{who} needs a nonempty source set")));
    }
    Ok(())
}

fn clip01(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// A random training sample rotated by 90, 180 or 270 degrees.
pub struct LetheanStream {
    source: Arc<ImageSet>,
    rng: ChaCha8Rng,
}

impl LetheanStream {
    pub fn new(train: Arc<ImageSet>, seed: u64) -> Result<Self> {
        require_nonempty(&train, "lethean stream")?;
        Ok(LetheanStream {
            source: train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl AttackStream for LetheanStream {
    fn name(&self) -> &str {
        "lethean"
    }

    fn next_item(&mut self, _model: &Model) -> Result<Option<StreamItem>> {
        let img = &self.source.images[self.rng.random_range(0..self.source.len())];
        let k = self.rng.random_range(1..4);
        Ok(Some(StreamItem {
            pixels: rotate90k(&img.pixels, k)?,
            source_label: Some(img.label),
            rotation: Some(k),
        }))
    }
}

/// Independent normal pixels matched to training statistics, clipped to
/// `[0, 1]`. One stats entry applies to every channel; otherwise one per
/// channel.
pub struct RandomPixelStream {
    shape: Vec<usize>,
    dists: Vec<Normal<f64>>,
    rng: ChaCha8Rng,
}

impl RandomPixelStream {
    pub fn new(stats: &[PixelStats], shape: &[usize], seed: u64) -> Result<Self> {
        let channels = shape.first().copied().unwrap_or(0);
        if stats.is_empty() || (stats.len() != 1 && stats.len() != channels) {
            return Err(Error::Input(format!(
                "random pixel stream needs 1 or {channels} stats entries, got {}",
                stats.len()
            )));
        }
        let dists = stats
            .iter()
            .map(|s| {
                Normal::new(s.mean, s.std)
                    .map_err(|e| Error::Input(format!("invalid pixel stats {s:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(RandomPixelStream {
            shape: shape.to_vec(),
            dists,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl AttackStream for RandomPixelStream {
    fn name(&self) -> &str {
        "random_pixel"
    }

    fn next_item(&mut self, _model: &Model) -> Result<Option<StreamItem>> {
        let plane: usize = self.shape[1..].iter().product();
        let per_channel = self.dists.len() > 1;
        let rng = &mut self.rng;
        let dists = &self.dists;
        let mut t = Tensor::from_fn(&self.shape, |i| {
            let d = if per_channel { &dists[i / plane] } else { &dists[0] };
            d.sample(rng)
        });
        clip01(&mut t);
        Ok(Some(StreamItem::plain(t)))
    }
}

/// A random test sample with additive Gaussian noise, clipped to `[0, 1]`.
pub struct CorruptionStream {
    source: Arc<ImageSet>,
    sigma: f64,
    noise: Normal<f64>,
    rng: ChaCha8Rng,
}

impl CorruptionStream {
    pub fn new(test: Arc<ImageSet>, sigma: f64, seed: u64) -> Result<Self> {
        require_nonempty(&test, "corruption stream")?;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Input(format!("corruption sigma must be >= 0, got {sigma}")));
        }
        Ok(CorruptionStream {
            source: test,
            sigma,
            noise: Normal::new(0.0, sigma).expect("validated sigma"),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl AttackStream for CorruptionStream {
    fn name(&self) -> &str {
        "corruption"
    }

    fn next_item(&mut self, _model: &Model) -> Result<Option<StreamItem>> {
        let img = &self.source.images[self.rng.random_range(0..self.source.len())];
        let mut t = img.pixels.clone();
        if self.sigma > 0.0 {
            for v in t.data_mut() {
                *v += self.noise.sample(&mut self.rng);
            }
            clip01(&mut t);
        }
        Ok(Some(StreamItem {
            pixels: t,
            source_label: Some(img.label),
            rotation: None,
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FgsmTarget {
    /// Craft against the model currently being adapted.
    Online,
    /// Craft against a fixed snapshot taken when the stream is built.
    Frozen,
}

/// `clip(x + eps * sign(d l_m / d x))` for a random training sample.
pub struct FgsmStream {
    source: Arc<ImageSet>,
    epsilon: f64,
    frozen: Option<Arc<Model>>,
    rng: ChaCha8Rng,
}

/// `sign` with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl FgsmStream {
    pub fn new(train: Arc<ImageSet>, epsilon: f64, frozen: Option<Arc<Model>>, seed: u64) -> Result<Self> {
        require_nonempty(&train, "fgsm stream")?;
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::Input(format!("fgsm epsilon must be >= 0, got {epsilon}")));
        }
        Ok(FgsmStream {
            source: train,
            epsilon,
            frozen,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl AttackStream for FgsmStream {
    fn name(&self) -> &str {
        "fgsm"
    }

    fn next_item(&mut self, model: &Model) -> Result<Option<StreamItem>> {
        let img = &self.source.images[self.rng.random_range(0..self.source.len())];
        let mut t = img.pixels.clone();
        if self.epsilon > 0.0 {
            let target = self.frozen.as_deref().unwrap_or(model);
            let g = target.main_input_grad(&img.pixels, img.label)?.input_grad;
            for (v, &d) in t.data_mut().iter_mut().zip(g.data()) {
                *v += self.epsilon * sign(d);
            }
            clip01(&mut t);
        }
        Ok(Some(StreamItem {
            pixels: t,
            source_label: Some(img.label),
            rotation: None,
        }))
    }
}

/// Replays a fixed list of items, then ends.
pub struct ReplayStream {
    name: String,
    items: std::vec::IntoIter<StreamItem>,
}

impl ReplayStream {
    pub fn new(name: impl Into<String>, items: Vec<StreamItem>) -> Self {
        ReplayStream {
            name: name.into(),
            items: items.into_iter(),
        }
    }

    pub fn from_tensors(name: impl Into<String>, tensors: Vec<Tensor>) -> Self {
        Self::new(name, tensors.into_iter().map(StreamItem::plain).collect())
    }
}

impl AttackStream for ReplayStream {
    fn name(&self) -> &str {
        &self.name
    }

    fn next_item(&mut self, _model: &Model) -> Result<Option<StreamItem>> {
        Ok(self.items.next())
    }
}

/// Ends the inner stream after `remaining` items.
pub struct Limit<S> {
    inner: S,
    remaining: usize,
}

impl<S: AttackStream> Limit<S> {
    pub fn new(inner: S, remaining: usize) -> Self {
        Limit { inner, remaining }
    }
}

impl<S: AttackStream> AttackStream for Limit<S> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn next_item(&mut self, model: &Model) -> Result<Option<StreamItem>> {
        if self.remaining == 0 {
            return Ok(None);
        }
        self.remaining -= 1;
        self.inner.next_item(model)
    }
}

/// Tunable stream parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackParams {
    pub corruption_sigma: f64,
    pub fgsm_epsilon: f64,
    pub fgsm_target: FgsmTarget,
}

impl Default for AttackParams {
    fn default() -> Self {
        AttackParams {
            corruption_sigma: 0.38,
            fgsm_epsilon: 0.2,
            fgsm_target: FgsmTarget::Online,
        }
    }
}

/// Everything a stream factory may draw on.
#[derive(Clone)]
pub struct AttackContext {
    pub train: Arc<ImageSet>,
    pub test: Arc<ImageSet>,
    /// Training pixel statistics: one global entry or one per channel.
    pub stats: Vec<PixelStats>,
    pub input_shape: Vec<usize>,
    /// Snapshot used when FGSM crafts against a frozen model.
    pub pretrained: Option<Arc<Model>>,
    pub params: AttackParams,
}

pub type StreamFactory = fn(&AttackContext, u64) -> Result<Box<dyn AttackStream>>;

/// Stream constructors keyed by name.
pub struct AttackRegistry {
    factories: BTreeMap<String, StreamFactory>,
}

fn make_lethean(ctx: &AttackContext, seed: u64) -> Result<Box<dyn AttackStream>> {
    Ok(Box::new(LetheanStream::new(ctx.train.clone(), seed)?))
}

fn make_random_pixel(ctx: &AttackContext, seed: u64) -> Result<Box<dyn AttackStream>> {
    Ok(Box::new(RandomPixelStream::new(&ctx.stats, &ctx.input_shape, seed)?))
}

fn make_corruption(ctx: &AttackContext, seed: u64) -> Result<Box<dyn AttackStream>> {
    Ok(Box::new(CorruptionStream::new(ctx.test.clone(), ctx.params.corruption_sigma, seed)?))
}

fn make_fgsm(ctx: &AttackContext, seed: u64) -> Result<Box<dyn AttackStream>> {
    let frozen = match ctx.params.fgsm_target {
        FgsmTarget::Online => None,
        FgsmTarget::Frozen => Some(ctx.pretrained.clone().ok_or_else(|| {
            Error::config("attack.fgsm", "frozen target requested but no pretrained model supplied")
        })?),
    };
    Ok(Box::new(FgsmStream::new(ctx.train.clone(), ctx.params.fgsm_epsilon, frozen, seed)?))
}

impl AttackRegistry {
    pub fn empty() -> Self {
        AttackRegistry {
            factories: BTreeMap::new(),
        }
    }

    /// The four built-in streams.
    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register("lethean", make_lethean);
        r.register("random_pixel", make_random_pixel);
        r.register("corruption", make_corruption);
        r.register("fgsm", make_fgsm);
        r
    }

    pub fn register(&mut self, name: impl Into<String>, factory: StreamFactory) {
        self.factories.insert(name.into(), factory);
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, name: &str, ctx: &AttackContext, seed: u64) -> Result<Box<dyn AttackStream>> {
        match self.factories.get(name) {
            Some(f) => f(ctx, seed),
            None => Err(Error::config(
                "attack.name",
                format!("unknown attack `{name}`; valid names: {}", self.names().join(", ")),
            )),
        }
    }
}
