//! The noise predictor and its toy text encoder, sharing one parameter set.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::codec::CodecKind;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{he_init, normal_init, ParamSet};
use crate::tensor::Tensor;
use crate::vocab::{self, CaptionTokens};

pub const CHECKPOINT_KIND: &str = "denoiser";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub image_channels: usize,
    /// Width at full resolution; the half-resolution stage uses twice this.
    pub channels: usize,
    /// Token embedding width `d`.
    pub text_width: usize,
    /// Token rows `L` of every text embedding.
    pub max_tokens: usize,
    pub time_width: usize,
    pub cond_width: usize,
    pub codec: CodecKind,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            channels: 16,
            text_width: 32,
            max_tokens: 12,
            time_width: 32,
            cond_width: 64,
            codec: CodecKind::Identity,
        }
    }
}

/// `L x d` conditioning matrix with the tokens that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub matrix: Tensor,
    pub tokens: CaptionTokens,
}

#[derive(Clone, Debug)]
pub struct DiffusionModel {
    cfg: DenoiserConfig,
    params: ParamSet,
    index: HashMap<String, usize>,
}

/// Model parameters registered in one graph.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn p(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }
}

fn sinusoid(t: usize, width: usize) -> Tensor {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (t as f64 * freq).sin();
        out[half + k] = (t as f64 * freq).cos();
    }
    Tensor::from_parts(&[1, width], out)
}

impl DiffusionModel {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        if cfg.channels == 0 || cfg.text_width == 0 || cfg.max_tokens == 0 || cfg.cond_width == 0 {
            return Err(Error::Config("denoiser widths must be positive".into()));
        }
        if cfg.time_width < 2 || !cfg.time_width.is_multiple_of(2) {
            return Err(Error::Config("time_width must be even and >= 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, c2, ci) = (cfg.channels, 2 * cfg.channels, cfg.image_channels);
        let (d, e) = (cfg.text_width, cfg.cond_width);
        let film_std = 0.1 / (e as f64).sqrt();
        let mut p = ParamSet::new();
        p.push("text.table", normal_init(&mut rng, &[vocab::vocab_size(), d], 1.0 / (d as f64).sqrt()));
        p.push("text.pos", normal_init(&mut rng, &[cfg.max_tokens, d], 0.1 / (d as f64).sqrt()));
        p.push("text.proj.w", he_init(&mut rng, &[e, d]));
        p.push("text.proj.b", Tensor::zeros(&[e]));
        p.push("time.w", he_init(&mut rng, &[e, cfg.time_width]));
        p.push("time.b", Tensor::zeros(&[e]));
        let mut conv = |p: &mut ParamSet, name: &str, co: usize, cin: usize, gain: f64| {
            p.push(format!("{name}.w"), he_init(&mut rng, &[co, cin, 3, 3]).map(|x| x * gain));
            p.push(format!("{name}.b"), Tensor::zeros(&[co]));
        };
        conv(&mut p, "in", c, ci, 1.0);
        conv(&mut p, "b1", c, c, 1.0);
        conv(&mut p, "down", c2, c, 1.0);
        conv(&mut p, "mid", c2, c2, 1.0);
        conv(&mut p, "up", c, c2, 1.0);
        conv(&mut p, "out", ci, c, 0.1);
        for (name, width) in [("b1", c), ("down", c2), ("mid", c2)] {
            for part in ["scale", "shift"] {
                p.push(format!("{name}.{part}.w"), normal_init(&mut rng, &[width, e], film_std));
                p.push(format!("{name}.{part}.b"), Tensor::zeros(&[width]));
            }
        }
        p.push("temporal.w", normal_init(&mut rng, &[c2, 3], 0.1));
        let index = p.names().iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(Self { cfg, params: p, index })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn arch_hash(&self) -> String {
        let text = toml::to_string(&self.cfg).expect("config serialises");
        checkpoint::arch_hash(CHECKPOINT_KIND, &text, &self.params)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            vars: self.params.bind(g, trainable),
            index: self.index.clone(),
        }
    }

    /// Embedding-table row for a vocabulary id.
    pub fn token_row(&self, id: usize) -> Tensor {
        let table = self.params.get(self.index["text.table"]);
        let d = self.cfg.text_width;
        Tensor::from_parts(&[d], table.data()[id * d..(id + 1) * d].to_vec())
    }

    /// Row ids for the `L` embedding rows: base tokens, padding, then any
    /// learnable slots right-aligned in the last rows.
    fn row_ids(&self, tokens: &CaptionTokens) -> Result<Vec<usize>> {
        let l = self.cfg.max_tokens;
        let base = tokens.base();
        let n = tokens.n_slots();
        if base.len() + n > l {
            return Err(Error::InvalidArgument(format!(
                "caption of {} tokens plus {n} slots exceeds {l} rows",
                base.len()
            )));
        }
        let mut ids = base.ids().to_vec();
        ids.resize(l - n, vocab::PAD);
        ids.extend(&tokens.ids()[tokens.len() - n..]);
        Ok(ids)
    }

    /// Differentiable `E_text`. `suffix` (`[n, d]`) replaces the embeddings of
    /// the `n` learnable slots, which occupy rows `L-n..L`.
    pub fn encode_text_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        tokens: &CaptionTokens,
        suffix: Option<Var>,
    ) -> Result<Var> {
        let l = self.cfg.max_tokens;
        let table = b.p("text.table");
        if tokens.is_null() && !tokens.is_empty() {
            return Ok(g.gather_rows(table, &vec![vocab::NULL; l]));
        }
        let ids = self.row_ids(tokens)?;
        let pos = b.p("text.pos");
        let Some(t) = suffix else {
            let rows = g.gather_rows(table, &ids);
            let all: Vec<usize> = (0..l).collect();
            let p = g.gather_rows(pos, &all);
            return Ok(g.add(rows, p));
        };
        let n = tokens.n_slots();
        if g.shape(t) != [n, self.cfg.text_width] {
            return Err(Error::Shape(format!(
                "suffix override must be [{n}, {}], got {:?}",
                self.cfg.text_width,
                g.shape(t)
            )));
        }
        let keep = l - n;
        let tail_idx: Vec<usize> = (keep..l).collect();
        let tail_pos = g.gather_rows(pos, &tail_idx);
        let tail = g.add(t, tail_pos);
        if keep == 0 {
            return Ok(tail);
        }
        let head_idx: Vec<usize> = (0..keep).collect();
        let head_rows = g.gather_rows(table, &ids[..keep]);
        let head_pos = g.gather_rows(pos, &head_idx);
        let head = g.add(head_rows, head_pos);
        Ok(g.concat(&[head, tail]))
    }

    pub fn encode_text(&self, tokens: &CaptionTokens) -> Result<TextEmbedding> {
        self.encode_text_with(tokens, None)
    }

    /// [`Self::encode_text`] with an optional `[n, d]` override for the learnable slots.
    pub fn encode_text_with(&self, tokens: &CaptionTokens, suffix: Option<&Tensor>) -> Result<TextEmbedding> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let s = suffix.map(|t| g.constant(t.clone()));
        let out = self.encode_text_graph(&mut g, &b, tokens, s)?;
        Ok(TextEmbedding {
            matrix: g.value(out).clone(),
            tokens: tokens.clone(),
        })
    }

    pub fn null_embedding(&self) -> TextEmbedding {
        self.encode_text(&CaptionTokens::null()).expect("null prompt always encodes")
    }

    fn film(&self, g: &mut Graph, b: &Bound, e: Var, x: Var, name: &str) -> Var {
        let width = g.shape(x)[1];
        let s = g.linear(e, b.p(&format!("{name}.scale.w")), b.p(&format!("{name}.scale.b")));
        let s = g.reshape(s, &[width]);
        let sh = g.linear(e, b.p(&format!("{name}.shift.w")), b.p(&format!("{name}.shift.b")));
        let sh = g.reshape(sh, &[width]);
        g.film(x, s, sh)
    }

    fn conv(&self, g: &mut Graph, b: &Bound, x: Var, name: &str, stride: usize) -> Var {
        g.conv2d(x, b.p(&format!("{name}.w")), b.p(&format!("{name}.b")), stride, 1)
    }

    /// `eps_theta(z_t, t, c)` for latents `[N, C, H, W]` (even `H`, `W`) and `cond [L, d]`.
    pub fn eps_graph(&self, g: &mut Graph, b: &Bound, z: Var, t: usize, cond: Var) -> Var {
        let zs = g.shape(z).to_vec();
        assert!(zs.len() == 4 && zs[1] == self.cfg.image_channels, "eps_graph: latent shape {zs:?}");
        assert!(zs[2].is_multiple_of(2) && zs[3].is_multiple_of(2), "eps_graph: spatial size must be even");
        assert_eq!(g.shape(cond), [self.cfg.max_tokens, self.cfg.text_width], "eps_graph: cond shape");

        let temb = g.constant(sinusoid(t, self.cfg.time_width));
        let th = g.linear(temb, b.p("time.w"), b.p("time.b"));
        let pooled = g.mean_rows(cond);
        let pooled = g.reshape(pooled, &[1, self.cfg.text_width]);
        let ch = g.linear(pooled, b.p("text.proj.w"), b.p("text.proj.b"));
        let e = g.add(th, ch);
        let e = g.silu(e);

        let h0 = self.conv(g, b, z, "in", 1);
        let a = self.conv(g, b, h0, "b1", 1);
        let a = self.film(g, b, e, a, "b1");
        let a = g.silu(a);
        let h1 = g.add(h0, a);

        let d = self.conv(g, b, h1, "down", 2);
        let d = self.film(g, b, e, d, "down");
        let d = g.silu(d);
        let tm = g.temporal_conv(d, b.p("temporal.w"));
        let d = g.add(d, tm);

        let m = self.conv(g, b, d, "mid", 1);
        let m = self.film(g, b, e, m, "mid");
        let m = g.silu(m);
        let m = g.add(d, m);

        let u = g.upsample2(m);
        let u = self.conv(g, b, u, "up", 1);
        let u = g.add(u, h1);
        let u = g.silu(u);
        self.conv(g, b, u, "out", 1)
    }

    /// Noise prediction outside any caller graph.
    pub fn predict_eps(&self, z_t: &Tensor, t: usize, cond: &TextEmbedding) -> Tensor {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let z = g.constant(z_t.clone());
        let c = g.constant(cond.matrix.clone());
        let out = self.eps_graph(&mut g, &b, z, t, c);
        g.value(out).clone()
    }

    pub fn save(&self, dir: &Path, mut meta: toml::Table) -> Result<String> {
        let cfg = toml::Table::try_from(&self.cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
        meta.insert("config".into(), toml::Value::Table(cfg));
        checkpoint::save(dir, CHECKPOINT_KIND, &self.arch_hash(), &self.params, meta)
    }

    /// Loads weights and returns the model with the checkpoint's extra metadata.
    pub fn load(dir: &Path) -> Result<(Self, toml::Table)> {
        let loaded = checkpoint::load(dir, CHECKPOINT_KIND)?;
        let mut meta = loaded.meta.clone();
        let cfg: DenoiserConfig = meta
            .remove("config")
            .ok_or_else(|| Error::Checkpoint("manifest lacks [meta.config]".into()))?
            .try_into()
            .map_err(|e: toml::de::Error| Error::Checkpoint(e.to_string()))?;
        let mut model = Self::new(cfg, 0)?;
        let hash = model.arch_hash();
        checkpoint::restore_into(loaded, &hash, &mut model.params)?;
        Ok((model, meta))
    }
}
