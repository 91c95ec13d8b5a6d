//! Flow-realism classifier: strided conv encoder, 3-layer head, sigmoid output.

pub mod corpus;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use corpus::{
    clip_flows, collect_fake_flows, collect_real_flows, FlowCorpus, FlowItem, Label, PairSpec, Provenance,
};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::graph::{Graph, Var};
use crate::nn::{he_init, normal_init, ParamSet, Sgd};
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "discriminator";
/// Logits are clamped to this magnitude before the sigmoid.
pub const LOGIT_LIMIT: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Output widths of the four stride-2 conv blocks.
    pub channels: [usize; 4],
    /// Hidden widths of the fully connected head; a final layer maps to one logit.
    pub hidden: [usize; 2],
    /// Flows are divided by this before the encoder, in pixels.
    pub flow_scale: f64,
    pub height: usize,
    pub width: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 32, 64],
            hidden: [64, 32],
            flow_scale: 1.0,
            height: 32,
            width: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    params: ParamSet,
    index: HashMap<String, usize>,
    trained: bool,
}

pub struct BoundDisc {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundDisc {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn p(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if !(cfg.flow_scale > 0.0) || cfg.height == 0 || cfg.width == 0 {
            return Err(Error::Config("discriminator needs flow_scale > 0 and a nonzero size".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let mut cin = 2;
        for (k, &co) in cfg.channels.iter().enumerate() {
            p.push(format!("enc{k}.w"), he_init(&mut rng, &[co, cin, 3, 3]));
            p.push(format!("enc{k}.b"), Tensor::zeros(&[co]));
            cin = co;
        }
        let widths = [cfg.channels[3], cfg.hidden[0], cfg.hidden[1]];
        for k in 0..2 {
            p.push(format!("fc{k}.w"), he_init(&mut rng, &[widths[k + 1], widths[k]]));
            p.push(format!("fc{k}.b"), Tensor::zeros(&[widths[k + 1]]));
        }
        p.push("fc2.w", normal_init(&mut rng, &[1, widths[2]], (1.0 / widths[2] as f64).sqrt()));
        p.push("fc2.b", Tensor::zeros(&[1]));
        let index = p.names().iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self {
            cfg,
            params: p,
            index,
            trained: false,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Guidance refuses discriminators that never went through training or a checkpoint.
    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn set_trained(&mut self, trained: bool) {
        self.trained = trained;
    }

    pub fn arch_hash(&self) -> String {
        let text = toml::to_string(&self.cfg).expect("config serialises");
        checkpoint::arch_hash(CHECKPOINT_KIND, &text, &self.params)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundDisc {
        BoundDisc {
            vars: self.params.bind(g, trainable),
            index: self.index.clone(),
        }
    }

    /// Clamped logits `[B, 1]` for flows `[B, 2, H, W]`.
    pub fn logit_graph(&self, g: &mut Graph, b: &BoundDisc, flows: Var) -> Var {
        let mut h = g.scale(flows, 1.0 / self.cfg.flow_scale);
        for k in 0..4 {
            h = g.conv2d(h, b.p(&format!("enc{k}.w")), b.p(&format!("enc{k}.b")), 2, 1);
            h = g.silu(h);
        }
        let mut x = g.spatial_mean(h);
        for k in 0..2 {
            x = g.linear(x, b.p(&format!("fc{k}.w")), b.p(&format!("fc{k}.b")));
            x = g.silu(x);
        }
        let logit = g.linear(x, b.p("fc2.w"), b.p("fc2.b"));
        g.clamp_abs(logit, LOGIT_LIMIT)
    }

    /// `log(1 - phi(f))` for one `[2, H, W]` flow node, as `-softplus(logit)`.
    pub fn log_one_minus_graph(&self, g: &mut Graph, b: &BoundDisc, flow: Var) -> Var {
        let s = g.shape(flow).to_vec();
        let batch = g.reshape(flow, &[1, s[0], s[1], s[2]]);
        let logit = self.logit_graph(g, b, batch);
        let sp = g.softplus(logit);
        let sp = g.sum(sp);
        g.scale(sp, -1.0)
    }

    fn check_shape(&self, f: &FlowField) -> Result<()> {
        if (f.height(), f.width()) != (self.cfg.height, self.cfg.width) {
            return Err(Error::Shape(format!(
                "discriminator expects {}x{} flows, got {}x{}",
                self.cfg.height,
                self.cfg.width,
                f.height(),
                f.width()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, flows: &[&FlowField]) -> Result<Vec<f64>> {
        if flows.is_empty() {
            return Ok(Vec::new());
        }
        for f in flows {
            self.check_shape(f)?;
        }
        let batch = Tensor::stack(&flows.iter().map(|f| f.tensor().clone()).collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(batch);
        let out = self.logit_graph(&mut g, &b, x);
        Ok(g.value(out).data().to_vec())
    }

    /// Probability that `flow` comes from a real video.
    pub fn classify(&self, flow: &FlowField) -> Result<f64> {
        Ok(sigmoid(self.logits(&[flow])?[0]))
    }

    pub fn save(&self, dir: &Path, mut meta: toml::Table) -> Result<String> {
        let cfg = toml::Table::try_from(&self.cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
        meta.insert("config".into(), toml::Value::Table(cfg));
        meta.insert("trained".into(), toml::Value::Boolean(self.trained));
        checkpoint::save(dir, CHECKPOINT_KIND, &self.arch_hash(), &self.params, meta)
    }

    pub fn load(dir: &Path) -> Result<(Self, toml::Table)> {
        let loaded = checkpoint::load(dir, CHECKPOINT_KIND)?;
        let mut meta = loaded.meta.clone();
        let cfg: DiscriminatorConfig = meta
            .remove("config")
            .ok_or_else(|| Error::Checkpoint("manifest lacks [meta.config]".into()))?
            .try_into()
            .map_err(|e: toml::de::Error| Error::Checkpoint(e.to_string()))?;
        let mut d = Self::new(cfg, 0)?;
        d.trained = meta.remove("trained").and_then(|v| v.as_bool()).unwrap_or(false);
        let hash = d.arch_hash();
        checkpoint::restore_into(loaded, &hash, &mut d.params)?;
        Ok((d, meta))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `-(mean log phi(real) + mean log(1 - phi(fake)))` from clamped logits;
/// a class with no samples contributes nothing.
pub fn bce_from_logits(real: &[f64], fake: &[f64]) -> f64 {
    let mean = |v: Vec<f64>| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    mean(real.iter().map(|&l| softplus(-l)).collect()) + mean(fake.iter().map(|&l| softplus(l)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Share of clips (per class) held out for validation.
    pub val_fraction: f64,
}

impl Default for DiscTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 0.0005,
            momentum: 0.9,
            val_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscTrainReport {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub val_accuracies: Vec<f64>,
    /// 1-based epoch whose weights were returned.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_val_accuracy: f64,
    pub n_train: usize,
    pub n_val: usize,
}

/// Splits item indices into train and validation by clip id, separately per class.
pub fn split_by_clip(corpus: &FlowCorpus, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for label in [Label::Real, Label::Fake] {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, item) in corpus.items.iter().enumerate() {
            if item.label == label {
                groups.entry(item.provenance.clip_id.as_str()).or_default().push(i);
            }
        }
        let mut ids: Vec<&str> = groups.keys().copied().collect();
        ids.shuffle(&mut rng);
        let n_val = ((ids.len() as f64 * val_fraction).round() as usize).min(ids.len().saturating_sub(1));
        for (k, id) in ids.iter().enumerate() {
            let dst = if k < n_val { &mut val } else { &mut train };
            dst.extend(&groups[id]);
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

struct Eval {
    loss: f64,
    accuracy: f64,
}

fn evaluate(d: &Discriminator, corpus: &FlowCorpus, idx: &[usize]) -> Result<Eval> {
    let (mut real, mut fake) = (Vec::new(), Vec::new());
    let mut correct = 0usize;
    for chunk in idx.chunks(64) {
        let flows: Vec<&FlowField> = chunk.iter().map(|&i| &corpus.items[i].flow).collect();
        for (&i, l) in chunk.iter().zip(d.logits(&flows)?) {
            let label = corpus.items[i].label;
            if (l > 0.0) == (label == Label::Real) {
                correct += 1;
            }
            match label {
                Label::Real => real.push(l),
                Label::Fake => fake.push(l),
            }
        }
    }
    Ok(Eval {
        loss: bce_from_logits(&real, &fake),
        accuracy: correct as f64 / idx.len().max(1) as f64,
    })
}

/// SGD with momentum on the two-term cross-entropy; returns the epoch with the
/// lowest validation loss.
pub fn train_discriminator(
    corpus: &FlowCorpus,
    cfg: &DiscTrainConfig,
    model_cfg: DiscriminatorConfig,
    seed: u64,
) -> Result<(Discriminator, DiscTrainReport)> {
    if corpus.count(Label::Real) == 0 || corpus.count(Label::Fake) == 0 {
        return Err(Error::InvalidArgument(
            "discriminator training needs both real and fake flows".into(),
        ));
    }
    let (h, w) = corpus.flow_shape()?;
    if (h, w) != (model_cfg.height, model_cfg.width) {
        return Err(Error::Shape(format!(
            "corpus flows are {h}x{w}, model expects {}x{}",
            model_cfg.height, model_cfg.width
        )));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("epochs and batch_size must be >= 1".into()));
    }
    let mut d = Discriminator::new(model_cfg, seed)?;
    let (mut train, val) = split_by_clip(corpus, cfg.val_fraction, seed);
    let mut opt = Sgd::new(&d.params, cfg.lr, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut report = DiscTrainReport {
        n_train: train.len(),
        n_val: val.len(),
        best_val_loss: f64::INFINITY,
        ..Default::default()
    };
    let mut best = d.params.clone();

    for epoch in 1..=cfg.epochs {
        train.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for batch in train.chunks(cfg.batch_size) {
            let (mut real, mut fake) = (Vec::new(), Vec::new());
            for &i in batch {
                match corpus.items[i].label {
                    Label::Real => real.push(corpus.items[i].flow.tensor().clone()),
                    Label::Fake => fake.push(corpus.items[i].flow.tensor().clone()),
                }
            }
            let mut g = Graph::new();
            let b = d.bind(&mut g, true);
            let mut terms = Vec::new();
            for (flows, sign) in [(real, -1.0), (fake, 1.0)] {
                if flows.is_empty() {
                    continue;
                }
                let x = g.constant(Tensor::stack(&flows)?);
                let logit = d.logit_graph(&mut g, &b, x);
                let signed = g.scale(logit, sign);
                let sp = g.softplus(signed);
                terms.push(g.mean(sp));
            }
            let loss = if terms.len() == 2 { g.add(terms[0], terms[1]) } else { terms[0] };
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Numerical(format!("discriminator loss is {lv} in epoch {epoch}")));
            }
            let mut grads = g.backward(loss);
            let gs = d.params.grads_of(&mut grads, b.vars());
            opt.step(&mut d.params, &gs);
            loss_sum += lv;
            n_batches += 1;
        }
        report.train_losses.push(loss_sum / n_batches as f64);
        let ev = evaluate(&d, corpus, if val.is_empty() { &train } else { &val })?;
        report.val_losses.push(ev.loss);
        report.val_accuracies.push(ev.accuracy);
        if ev.loss < report.best_val_loss {
            report.best_val_loss = ev.loss;
            report.best_val_accuracy = ev.accuracy;
            report.best_epoch = epoch;
            best = d.params.clone();
        }
    }
    d.params = best;
    d.trained = true;
    Ok((d, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logits_give_indifference_loss() {
        assert_eq!(bce_from_logits(&[0.0], &[0.0]), 2.0 * 2f64.ln());
        assert!(bce_from_logits(&[40.0], &[-40.0]) < 1e-12);
    }

    #[test]
    fn untrained_output_is_undecided() {
        let d = Discriminator::new(DiscriminatorConfig::default(), 3).unwrap();
        let p = d.classify(&FlowField::uniform(32, 32, 1.0, -0.5)).unwrap();
        assert!((p - 0.5).abs() < 0.25, "{p}");
        assert!(!d.is_trained());
        assert!(d.classify(&FlowField::zeros(16, 16)).is_err());
    }

    #[test]
    fn single_class_corpus_is_rejected() {
        let item = FlowItem {
            flow: FlowField::zeros(32, 32),
            label: Label::Real,
            provenance: Provenance {
                clip_id: "a".into(),
                frames: (0, 1),
            },
        };
        let corpus = FlowCorpus { items: vec![item] };
        let r = train_discriminator(&corpus, &DiscTrainConfig::default(), DiscriminatorConfig::default(), 0);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }
}