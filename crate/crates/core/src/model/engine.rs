// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-layernorm GPT-2 forward pass with KV caching and residual-stream hooks.

use super::linalg::{dot, gelu, layer_norm, linear, softmax, Matrix};
use super::{ModelBundle, ModelConfig, TokenId};
use crate::error::{Error, Result};

/// Observation and intervention points of the forward pass.
///
/// Positions handed to hooks are absolute and 0-based: row `r` of `rows`
/// is position `start + r`.
pub trait ForwardHooks {
    /// Residual stream at a layer boundary: `layer == 0` is the embedding
    /// output (token + position), `layer == l` is the output of block `l`.
    /// Writes to `rows` propagate into the rest of the pass.
    fn residual(&mut self, _layer: usize, _start: usize, _rows: &mut Matrix) {}

    /// Internals of block `layer` (1-based): the residual after the attention
    /// branch was added, and the MLP branch output about to be added to it.
    fn block(&mut self, _layer: usize, _start: usize, _pre_mlp: &Matrix, _mlp_out: &Matrix) {}
}

pub struct NoHooks;

impl ForwardHooks for NoHooks {}

impl<T: ForwardHooks + ?Sized> ForwardHooks for &mut T {
    fn residual(&mut self, layer: usize, start: usize, rows: &mut Matrix) {
        (**self).residual(layer, start, rows)
    }

    fn block(&mut self, layer: usize, start: usize, pre_mlp: &Matrix, mlp_out: &Matrix) {
        (**self).block(layer, start, pre_mlp, mlp_out)
    }
}

/// Per-layer attention keys and values of already processed positions.
///
/// Stored position-major (`positions_filled x d_model` per layer); the
/// logical layout `(n_heads, positions_filled, head_dim)` is exposed by
/// [`KvCache::key`] / [`KvCache::value`].
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    filled: usize,
    config: ModelConfig,
}

impl KvCache {
    pub fn new(config: &ModelConfig) -> Self {
        KvCache {
            keys: vec![Vec::new(); config.n_layers],
            values: vec![Vec::new(); config.n_layers],
            filled: 0,
            config: *config,
        }
    }

    pub fn positions_filled(&self) -> usize {
        self.filled
    }

    /// `(n_heads, positions_filled, head_dim)`
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.config.n_heads, self.filled, self.config.head_dim())
    }

    pub fn key(&self, layer: usize, head: usize, position: usize) -> &[f32] {
        let hd = self.config.head_dim();
        let row = position * self.config.d_model + head * hd;
        &self.keys[layer][row..row + hd]
    }

    pub fn value(&self, layer: usize, head: usize, position: usize) -> &[f32] {
        let hd = self.config.head_dim();
        let row = position * self.config.d_model + head * hd;
        &self.values[layer][row..row + hd]
    }
}

/// Which positions get unembedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitRows {
    All,
    Last,
    None,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `(rows, vocab)` for the requested rows.
    pub logits: Matrix,
    /// Output of the last block (before the final layernorm), one row per new position.
    pub final_hidden: Matrix,
}

impl ModelBundle {
    /// Plain forward pass returning logits for every new position.
    pub fn forward(&self, ids: &[TokenId], cache: Option<KvCache>) -> Result<(Matrix, KvCache)> {
        let mut cache = cache.unwrap_or_else(|| KvCache::new(self.config()));
        let out = self.forward_hooked(ids, &mut cache, &mut NoHooks, LogitRows::All)?;
        Ok((out.logits, cache))
    }

    /// Forward pass over `ids` appended after the cached positions, with hooks.
    pub fn forward_hooked(
        &self,
        ids: &[TokenId],
        cache: &mut KvCache,
        hooks: &mut dyn ForwardHooks,
        logit_rows: LogitRows,
    ) -> Result<ForwardOutput> {
        let cfg = *self.config();
        if cache.config != cfg {
            return Err(Error::InvalidArgument(
                "kv cache was built for a different model configuration".into(),
            ));
        }
        let start = cache.filled;
        let n = ids.len();
        if start + n > cfg.max_positions {
            return Err(Error::ContextOverflow {
                requested: start + n,
                max: cfg.max_positions,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::UnknownToken {
                id,
                vocab_size: cfg.vocab_size,
            });
        }

        let d = cfg.d_model;
        let w = &self.weights;
        let mut x = Matrix::zeros(n, d);
        for (t, &id) in ids.iter().enumerate() {
            let tok = &w.token_embedding[id as usize * d..(id as usize + 1) * d];
            let pos = &w.position_embedding[(start + t) * d..(start + t + 1) * d];
            for ((o, a), b) in x.row_mut(t).iter_mut().zip(tok).zip(pos) {
                *o = a + b;
            }
        }
        hooks.residual(0, start, &mut x);

        for (layer, b) in w.blocks.iter().enumerate() {
            let a = layer_norm(&x, &b.ln1_gain, &b.ln1_bias, cfg.layernorm_epsilon);
            let qkv = linear(&a, &b.qkv_weight, &b.qkv_bias, 3 * d);
            for t in 0..n {
                let row = qkv.row(t);
                cache.keys[layer].extend_from_slice(&row[d..2 * d]);
                cache.values[layer].extend_from_slice(&row[2 * d..]);
            }
            let ctx = self.attend(&qkv, layer, start, cache);
            let attn_out = linear(&ctx, &b.attn_proj_weight, &b.attn_proj_bias, d);
            x.add_assign(&attn_out);
            let pre_mlp = x.clone();

            let m = layer_norm(&x, &b.ln2_gain, &b.ln2_bias, cfg.layernorm_epsilon);
            let mut hidden = linear(&m, &b.fc_weight, &b.fc_bias, cfg.d_ff());
            hidden.data.iter_mut().for_each(|v| *v = gelu(*v));
            let mlp_out = linear(&hidden, &b.mlp_proj_weight, &b.mlp_proj_bias, d);
            x.add_assign(&mlp_out);

            hooks.block(layer + 1, start, &pre_mlp, &mlp_out);
            hooks.residual(layer + 1, start, &mut x);
        }
        cache.filled = start + n;

        let logits = match logit_rows {
            LogitRows::None => Matrix::zeros(0, cfg.vocab_size),
            LogitRows::All => self.unembed(&x),
            LogitRows::Last if n == 0 => Matrix::zeros(0, cfg.vocab_size),
            LogitRows::Last => {
                let last = Matrix::from_vec(1, d, x.row(n - 1).to_vec());
                self.unembed(&last)
            }
        };
        Ok(ForwardOutput {
            logits,
            final_hidden: x,
        })
    }

    /// Causal multi-head attention of the new rows over every cached position.
    fn attend(&self, qkv: &Matrix, layer: usize, start: usize, cache: &KvCache) -> Matrix {
        let cfg = self.config();
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let scale = (hd as f32).sqrt();
        let mut ctx = Matrix::zeros(qkv.rows, d);
        let mut scores = Vec::with_capacity(start + qkv.rows);
        for t in 0..qkv.rows {
            let visible = start + t + 1;
            for h in 0..cfg.n_heads {
                let q = &qkv.row(t)[h * hd..(h + 1) * hd];
                scores.clear();
                scores.extend((0..visible).map(|j| dot(q, cache.key(layer, h, j)) / scale));
                softmax(&mut scores);
                let out = &mut ctx.row_mut(t)[h * hd..(h + 1) * hd];
                for (j, &p) in scores.iter().enumerate() {
                    for (o, &v) in out.iter_mut().zip(cache.value(layer, h, j)) {
                        *o += p * v;
                    }
                }
            }
        }
        ctx
    }

    /// Final layernorm followed by the tied unembedding.
    pub(crate) fn unembed(&self, x: &Matrix) -> Matrix {
        let f = self.final_norm(x);
        let cfg = self.config();
        let d = cfg.d_model;
        let mut logits = Matrix::zeros(x.rows, cfg.vocab_size);
        for r in 0..x.rows {
            let fr = f.row(r);
            for (v, out) in logits.row_mut(r).iter_mut().enumerate() {
                *out = dot(fr, &self.weights.token_embedding[v * d..(v + 1) * d]);
            }
        }
        logits
    }

    pub(crate) fn final_norm(&self, x: &Matrix) -> Matrix {
        layer_norm(
            x,
            &self.weights.lnf_gain,
            &self.weights.lnf_bias,
            self.config().layernorm_epsilon,
        )
    }
}

/// Hook that checks every intermediate shape against the configuration.
#[derive(Debug)]
pub struct ShapeAudit {
    config: ModelConfig,
    next_layer: usize,
    pub violations: Vec<String>,
}

impl ShapeAudit {
    pub fn new(config: &ModelConfig) -> Self {
        ShapeAudit {
            config: *config,
            next_layer: 0,
            violations: Vec::new(),
        }
    }

    fn check(&mut self, what: &str, layer: usize, start: usize, m: &Matrix) {
        if m.cols != self.config.d_model || m.data.len() != m.rows * m.cols {
            self.violations.push(format!(
                "{what} at layer {layer}: shape ({}, {}) with {} elements, d_model {}",
                m.rows,
                m.cols,
                m.data.len(),
                self.config.d_model
            ));
        }
        if start + m.rows > self.config.max_positions {
            self.violations
                .push(format!("{what} at layer {layer}: positions exceed max_positions"));
        }
    }
}

impl ForwardHooks for ShapeAudit {
    fn residual(&mut self, layer: usize, start: usize, rows: &mut Matrix) {
        if layer != self.next_layer || layer > self.config.n_layers {
            self.violations
                .push(format!("residual hook for layer {layer}, expected {}", self.next_layer));
        }
        self.next_layer = (layer + 1) % (self.config.n_layers + 1);
        self.check("residual", layer, start, rows);
    }

    fn block(&mut self, layer: usize, start: usize, pre_mlp: &Matrix, mlp_out: &Matrix) {
        self.check("pre_mlp", layer, start, pre_mlp);
        self.check("mlp_out", layer, start, mlp_out);
        if pre_mlp.rows != mlp_out.rows {
            self.violations.push(format!("block {layer}: row count mismatch"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::toy;

    fn small() -> ModelBundle {
        toy::random_bundle(ModelConfig::new(3, 16, 4, 257, 32).unwrap(), 11)
    }

    #[test]
    fn cached_chunks_match_single_pass() {
        let bundle = small();
        let ids: Vec<TokenId> = bundle.encode("chunked prompt!").unwrap().ids;
        let (full, _) = bundle.forward(&ids, None).unwrap();
        for split in 1..ids.len() {
            let (_, cache) = bundle.forward(&ids[..split], None).unwrap();
            let (tail, cache) = bundle.forward(&ids[split..], Some(cache)).unwrap();
            assert_eq!(cache.positions_filled(), ids.len());
            let last_full = full.row(ids.len() - 1);
            let last_tail = tail.row(tail.rows - 1);
            for (a, b) in last_full.iter().zip(last_tail) {
                assert!((a - b).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn overflow_is_reported() {
        let bundle = small();
        let ids = vec![1; 33];
        assert!(matches!(
            bundle.forward(&ids, None),
            Err(Error::ContextOverflow { requested: 33, max: 32 })
        ));
        let (_, cache) = bundle.forward(&[1; 30], None).unwrap();
        assert!(matches!(
            bundle.forward(&[1; 3], Some(cache)),
            Err(Error::ContextOverflow { .. })
        ));
    }

    #[test]
    fn out_of_vocab_id_is_rejected() {
        let bundle = small();
        assert!(matches!(
            bundle.forward(&[300], None),
            Err(Error::UnknownToken { id: 300, .. })
        ));
    }

    #[test]
    fn zero_branches_pass_the_embedding_through() {
        let bundle = toy::zero_branch_bundle(ModelConfig::new(2, 8, 1, 257, 16).unwrap(), 3);
        struct Collect(Vec<Matrix>);
        impl ForwardHooks for Collect {
            fn residual(&mut self, _l: usize, _s: usize, rows: &mut Matrix) {
                self.0.push(rows.clone());
            }
        }
        let mut hooks = Collect(Vec::new());
        let ids = bundle.encode("abc").unwrap().ids;
        let mut cache = KvCache::new(bundle.config());
        bundle
            .forward_hooked(&ids, &mut cache, &mut hooks, LogitRows::None)
            .unwrap();
        assert_eq!(hooks.0.len(), 3);
        assert_eq!(hooks.0[1], hooks.0[0]);
        assert_eq!(hooks.0[2], hooks.0[0]);
    }

    #[test]
    fn shape_audit_is_clean() {
        let bundle = small();
        let mut audit = ShapeAudit::new(bundle.config());
        let ids = bundle.encode("shape audit").unwrap().ids;
        let mut cache = KvCache::new(bundle.config());
        bundle
            .forward_hooked(&ids[..4], &mut cache, &mut audit, LogitRows::Last)
            .unwrap();
        bundle
            .forward_hooked(&ids[4..], &mut cache, &mut audit, LogitRows::All)
            .unwrap();
        assert!(audit.violations.is_empty(), "{:?}", audit.violations);
        assert_eq!(cache.shape(), (4, ids.len(), 4));
    }
}
