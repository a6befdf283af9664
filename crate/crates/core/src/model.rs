//! Desk-scale classifiers with tap-instrumented forward passes.
//!
//! A classifier is a stack of registered blocks (plain conv or residual);
//! the tap at block `i` is the spatially average-pooled feature map, so the
//! per-layer embedding `z_i` has the block's channel count as its
//! dimensionality. The logit head reads the last pooled embedding. Gradients
//! of any scalar in the trace can be pulled back to the input pixels
//! (attacks) or to the parameters (training) through hand-written adjoints.

use crate::error::{Error, Result};
use crate::math::{argmax, shannon_entropy, softmax};
use crate::nn::{relu_backward_inplace, relu_inplace, AdamW, Conv2d, Linear, Param};
use crate::rng::SeedStream;
use crate::scalar::Real;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Conv,
    Residual,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockDef {
    pub kind: BlockKind,
    pub cout: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchDef {
    pub id: String,
    pub blocks: Vec<BlockDef>,
}

impl ArchDef {
    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }
}

fn conv_def(cout: usize, stride: usize) -> BlockDef {
    BlockDef {
        kind: BlockKind::Conv,
        cout,
        stride,
    }
}

fn res_def(cout: usize, stride: usize) -> BlockDef {
    BlockDef {
        kind: BlockKind::Residual,
        cout,
        stride,
    }
}

/// Registered architectures. `plain8` is the default desk-scale stack,
/// `res8` its residual counterpart, `plain4` / `plain3` the small nets used
/// by fast profiles and tests.
pub fn registry() -> BTreeMap<String, ArchDef> {
    let mut m = BTreeMap::new();
    m.insert(
        "plain8".to_string(),
        ArchDef {
            id: "plain8".into(),
            blocks: vec![
                conv_def(16, 1),
                conv_def(32, 2),
                conv_def(32, 1),
                conv_def(64, 2),
                conv_def(64, 1),
                conv_def(128, 2),
                conv_def(128, 1),
                conv_def(128, 1),
            ],
        },
    );
    m.insert(
        "res8".to_string(),
        ArchDef {
            id: "res8".into(),
            blocks: vec![
                conv_def(16, 1),
                res_def(16, 1),
                res_def(32, 2),
                res_def(32, 1),
                res_def(64, 2),
                res_def(64, 1),
                res_def(128, 2),
                res_def(128, 1),
            ],
        },
    );
    m.insert(
        "plain4".to_string(),
        ArchDef {
            id: "plain4".into(),
            blocks: vec![
                conv_def(12, 1),
                conv_def(24, 2),
                conv_def(48, 2),
                conv_def(48, 1),
            ],
        },
    );
    m.insert(
        "plain3".to_string(),
        ArchDef {
            id: "plain3".into(),
            blocks: vec![conv_def(8, 1), conv_def(16, 2), conv_def(16, 1)],
        },
    );
    m
}

#[derive(Debug, Clone)]
pub enum Block<F> {
    Conv {
        conv: Conv2d<F>,
    },
    Residual {
        conv1: Conv2d<F>,
        conv2: Conv2d<F>,
        shortcut: Option<Conv2d<F>>,
    },
}

impl<F: Real> Block<F> {
    fn param_count(&self) -> usize {
        match self {
            Block::Conv { conv } => conv.param_count(),
            Block::Residual {
                conv1,
                conv2,
                shortcut,
            } => {
                conv1.param_count()
                    + conv2.param_count()
                    + shortcut.as_ref().map_or(0, |s| s.param_count())
            }
        }
    }

    fn zero_grad(&mut self) {
        match self {
            Block::Conv { conv } => conv.zero_grad(),
            Block::Residual {
                conv1,
                conv2,
                shortcut,
            } => {
                conv1.zero_grad();
                conv2.zero_grad();
                if let Some(s) = shortcut {
                    s.zero_grad();
                }
            }
        }
    }
}

/// The network: registered blocks plus a linear logit head on the pooled
/// final embedding.
#[derive(Debug, Clone)]
pub struct ClassifierNet<F> {
    pub arch: ArchDef,
    pub input_shape: (usize, usize, usize),
    pub num_classes: usize,
    pub blocks: Vec<Block<F>>,
    pub head: Linear<F>,
    /// Channel count of each tap (embedding dimensionality per layer).
    pub layer_dims: Vec<usize>,
    /// Spatial size after each block.
    pub spatial: Vec<(usize, usize)>,
}

/// Batch activations retained by [`ClassifierNet::forward`]: post-activation
/// maps, pooled taps and logits.
pub struct ForwardCache<F> {
    pub input: Tensor<F>,
    pub block_out: Vec<Tensor<F>>,
    pub res_mid: Vec<Option<Tensor<F>>>,
    /// Pooled embeddings per layer, `[batch, D_i]`.
    pub z: Vec<Tensor<F>>,
    pub logits: Tensor<F>,
}

impl<F: Real> ForwardCache<F> {
    pub fn batch(&self) -> usize {
        self.input.len()
    }
}

/// Per-input view of the tapped forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace<F> {
    pub z: Vec<Vec<F>>,
    pub logits: Vec<F>,
    pub probs: Vec<F>,
    pub predicted: usize,
}

impl<F: Real> LayerTrace<F> {
    pub fn num_layers(&self) -> usize {
        self.z.len()
    }

    pub fn entropy(&self) -> F {
        shannon_entropy(&self.probs)
    }
}

impl<F: Real> ClassifierNet<F> {
    pub fn new(
        arch: &ArchDef,
        input_shape: (usize, usize, usize),
        num_classes: usize,
        rng: &mut SeedStream,
    ) -> Result<Self> {
        if arch.blocks.len() < 3 {
            return Err(Error::Config(format!(
                "architecture {} has {} blocks; at least 3 tap points required",
                arch.id,
                arch.blocks.len()
            )));
        }
        let (c0, mut h, mut w) = input_shape;
        let mut cin = c0;
        let mut blocks = Vec::with_capacity(arch.blocks.len());
        let mut layer_dims = Vec::with_capacity(arch.blocks.len());
        let mut spatial = Vec::with_capacity(arch.blocks.len());
        for def in &arch.blocks {
            let block = match def.kind {
                BlockKind::Conv => Block::Conv {
                    conv: Conv2d::new(cin, def.cout, 3, def.stride, 1, rng),
                },
                BlockKind::Residual => {
                    let conv1 = Conv2d::new(cin, def.cout, 3, def.stride, 1, rng);
                    let conv2 = Conv2d::new(def.cout, def.cout, 3, 1, 1, rng);
                    let shortcut = if def.stride != 1 || cin != def.cout {
                        Some(Conv2d::new(cin, def.cout, 1, def.stride, 0, rng))
                    } else {
                        None
                    };
                    Block::Residual {
                        conv1,
                        conv2,
                        shortcut,
                    }
                }
            };
            h = (h + 2 - 3) / def.stride + 1;
            w = (w + 2 - 3) / def.stride + 1;
            if h == 0 || w == 0 {
                return Err(Error::Config(format!(
                    "architecture {} collapses the {}x{} input to zero spatial size",
                    arch.id, input_shape.1, input_shape.2
                )));
            }
            blocks.push(block);
            layer_dims.push(def.cout);
            spatial.push((h, w));
            cin = def.cout;
        }
        let head = Linear::new(cin, num_classes, 1.0, rng);
        Ok(ClassifierNet {
            arch: arch.clone(),
            input_shape,
            num_classes,
            blocks,
            head,
            layer_dims,
            spatial,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn d_last(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.param_count()).sum::<usize>() + self.head.param_count()
    }

    pub fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        let s = x.shape();
        let (c, h, w) = self.input_shape;
        if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w {
            return Err(Error::Contract(format!(
                "input shape {s:?} does not match model input ({c}, {h}, {w})"
            )));
        }
        Ok(())
    }

    fn in_dims(&self, i: usize) -> (usize, usize, usize) {
        if i == 0 {
            self.input_shape
        } else {
            let (h, w) = self.spatial[i - 1];
            (self.layer_dims[i - 1], h, w)
        }
    }

    /// Tap-instrumented forward pass over a batch. Pure in `(self, x)`.
    pub fn forward(&self, x: &Tensor<F>) -> ForwardCache<F> {
        let b = x.len();
        let l = self.blocks.len();
        let mut block_out: Vec<Tensor<F>> = Vec::with_capacity(l);
        let mut res_mid: Vec<Option<Tensor<F>>> = Vec::with_capacity(l);
        let mut z: Vec<Tensor<F>> = Vec::with_capacity(l);

        for i in 0..l {
            let (cin, hin, win) = self.in_dims(i);
            let (oh, ow) = self.spatial[i];
            let cout = self.layer_dims[i];
            let mut out = Tensor::zeros(&[b, cout, oh, ow]);
            let mut mid_store: Option<Tensor<F>> = None;
            {
                let prev: &Tensor<F> = if i == 0 { x } else { &block_out[i - 1] };
                match &self.blocks[i] {
                    Block::Conv { conv } => {
                        let mut cols = vec![F::zero(); conv.col_rows() * oh * ow];
                        for s in 0..b {
                            conv.forward_image(prev.item(s), hin, win, &mut cols, out.item_mut(s));
                            relu_inplace(out.item_mut(s));
                        }
                        let _ = cin;
                    }
                    Block::Residual {
                        conv1,
                        conv2,
                        shortcut,
                    } => {
                        let mut mid = Tensor::zeros(&[b, cout, oh, ow]);
                        let mut cols1 = vec![F::zero(); conv1.col_rows() * oh * ow];
                        let mut cols2 = vec![F::zero(); conv2.col_rows() * oh * ow];
                        let mut sc_buf = vec![F::zero(); cout * oh * ow];
                        for s in 0..b {
                            conv1.forward_image(prev.item(s), hin, win, &mut cols1, mid.item_mut(s));
                            relu_inplace(mid.item_mut(s));
                            conv2.forward_image(mid.item(s), oh, ow, &mut cols2, out.item_mut(s));
                            match shortcut {
                                Some(sc) => {
                                    let mut cols_sc =
                                        vec![F::zero(); sc.col_rows() * oh * ow];
                                    sc.forward_image(prev.item(s), hin, win, &mut cols_sc, &mut sc_buf);
                                    let o = out.item_mut(s);
                                    for (ov, &sv) in o.iter_mut().zip(sc_buf.iter()) {
                                        *ov += sv;
                                    }
                                }
                                None => {
                                    let o = out.item_mut(s);
                                    for (ov, &pv) in o.iter_mut().zip(prev.item(s).iter()) {
                                        *ov += pv;
                                    }
                                }
                            }
                            relu_inplace(out.item_mut(s));
                        }
                        mid_store = Some(mid);
                    }
                }
            }
            z.push(global_avg_pool(&out));
            block_out.push(out);
            res_mid.push(mid_store);
        }

        let z_last = &z[l - 1];
        let mut logits = Tensor::zeros(&[b, self.num_classes]);
        self.head.forward(z_last.data(), b, logits.data_mut());

        ForwardCache {
            input: x.clone(),
            block_out,
            res_mid,
            z,
            logits,
        }
    }

    /// One [`LayerTrace`] per input in the cached batch.
    pub fn traces(&self, cache: &ForwardCache<F>) -> Vec<LayerTrace<F>> {
        let b = cache.batch();
        (0..b)
            .map(|s| {
                let logits = cache.logits.item(s).to_vec();
                let probs = softmax(&logits);
                let predicted = argmax(&probs);
                LayerTrace {
                    z: cache.z.iter().map(|zi| zi.item(s).to_vec()).collect(),
                    logits,
                    probs,
                    predicted,
                }
            })
            .collect()
    }

    /// Input cotangent of `sum_i <d_z[i], z_i> + <d_logits, logits>`.
    /// Pure; usable on a shared model.
    pub fn backward_input(
        &self,
        cache: &ForwardCache<F>,
        d_z: &[Option<Tensor<F>>],
        d_logits: Option<&Tensor<F>>,
    ) -> Tensor<F> {
        let b = cache.batch();
        let l = self.blocks.len();
        debug_assert_eq!(d_z.len(), l);

        let d_last = self.d_last();
        let mut dz_last = vec![F::zero(); b * d_last];
        if let Some(dl) = d_logits {
            self.head.backward_input(dl.data(), b, &mut dz_last);
        }
        if let Some(dz) = &d_z[l - 1] {
            for (a, &v) in dz_last.iter_mut().zip(dz.data().iter()) {
                *a += v;
            }
        }

        let (oh, ow) = self.spatial[l - 1];
        let mut g = Tensor::zeros(&[b, d_last, oh, ow]);
        gap_backward_add(&dz_last, b, d_last, oh, ow, g.data_mut());

        for i in (0..l).rev() {
            let mut g_prev = self.block_backward_input(i, cache, &mut g);
            if i > 0 {
                if let Some(dz) = &d_z[i - 1] {
                    let (cin, hin, win) = self.in_dims(i);
                    gap_backward_add(dz.data(), b, cin, hin, win, g_prev.data_mut());
                }
            }
            g = g_prev;
        }
        g
    }

    /// Block input cotangent; `g` is consumed (masked in place).
    fn block_backward_input(
        &self,
        i: usize,
        cache: &ForwardCache<F>,
        g: &mut Tensor<F>,
    ) -> Tensor<F> {
        let b = cache.batch();
        let (cin, hin, win) = self.in_dims(i);
        let (oh, ow) = self.spatial[i];
        let mut g_prev = Tensor::zeros(&[b, cin, hin, win]);
        match &self.blocks[i] {
            Block::Conv { conv } => {
                let mut dcols = vec![F::zero(); conv.col_rows() * oh * ow];
                for s in 0..b {
                    relu_backward_inplace(g.item_mut(s), cache.block_out[i].item(s));
                    conv.backward_input(g.item(s), hin, win, g_prev.item_mut(s), &mut dcols);
                }
            }
            Block::Residual {
                conv1,
                conv2,
                shortcut,
            } => {
                let mid = cache.res_mid[i].as_ref().expect("residual cache");
                let cout = self.layer_dims[i];
                let mut dmid = vec![F::zero(); cout * oh * ow];
                let mut dcols1 = vec![F::zero(); conv1.col_rows() * oh * ow];
                let mut dcols2 = vec![F::zero(); conv2.col_rows() * oh * ow];
                for s in 0..b {
                    relu_backward_inplace(g.item_mut(s), cache.block_out[i].item(s));
                    for v in dmid.iter_mut() {
                        *v = F::zero();
                    }
                    conv2.backward_input(g.item(s), oh, ow, &mut dmid, &mut dcols2);
                    relu_backward_inplace(&mut dmid, mid.item(s));
                    conv1.backward_input(&dmid, hin, win, g_prev.item_mut(s), &mut dcols1);
                    match shortcut {
                        Some(sc) => {
                            let mut dcols_sc = vec![F::zero(); sc.col_rows() * oh * ow];
                            sc.backward_input(
                                g.item(s),
                                hin,
                                win,
                                g_prev.item_mut(s),
                                &mut dcols_sc,
                            );
                        }
                        None => {
                            let gp = g_prev.item_mut(s);
                            for (a, &v) in gp.iter_mut().zip(g.item(s).iter()) {
                                *a += v;
                            }
                        }
                    }
                }
            }
        }
        g_prev
    }

    /// Training backward: accumulate parameter gradients for a logit
    /// cotangent (classification loss).
    pub fn backward_train(&mut self, cache: &ForwardCache<F>, d_logits: &Tensor<F>) {
        let b = cache.batch();
        let l = self.blocks.len();
        let d_last = self.d_last();

        self.head
            .backward_params(cache.z[l - 1].data(), d_logits.data(), b);
        let mut dz_last = vec![F::zero(); b * d_last];
        self.head.backward_input(d_logits.data(), b, &mut dz_last);

        let (oh, ow) = self.spatial[l - 1];
        let mut g = Tensor::zeros(&[b, d_last, oh, ow]);
        gap_backward_add(&dz_last, b, d_last, oh, ow, g.data_mut());

        for i in (0..l).rev() {
            g = self.block_backward_train(i, cache, &mut g);
        }
    }

    fn block_backward_train(
        &mut self,
        i: usize,
        cache: &ForwardCache<F>,
        g: &mut Tensor<F>,
    ) -> Tensor<F> {
        let b = cache.batch();
        let (cin, hin, win) = self.in_dims(i);
        let (oh, ow) = self.spatial[i];
        let mut g_prev = Tensor::zeros(&[b, cin, hin, win]);
        let input_owner;
        let input: &Tensor<F> = if i == 0 {
            &cache.input
        } else {
            input_owner = &cache.block_out[i - 1];
            input_owner
        };
        match &mut self.blocks[i] {
            Block::Conv { conv } => {
                let mut cols = vec![F::zero(); conv.col_rows() * oh * ow];
                let mut dcols = vec![F::zero(); conv.col_rows() * oh * ow];
                for s in 0..b {
                    relu_backward_inplace(g.item_mut(s), cache.block_out[i].item(s));
                    conv.im2col(input.item(s), hin, win, &mut cols);
                    conv.backward_params(&cols, g.item(s), hin, win);
                    conv.backward_input(g.item(s), hin, win, g_prev.item_mut(s), &mut dcols);
                }
            }
            Block::Residual {
                conv1,
                conv2,
                shortcut,
            } => {
                let mid = cache.res_mid[i].as_ref().expect("residual cache");
                let cout = conv2.cout;
                let mut dmid = vec![F::zero(); cout * oh * ow];
                let mut cols1 = vec![F::zero(); conv1.col_rows() * oh * ow];
                let mut cols2 = vec![F::zero(); conv2.col_rows() * oh * ow];
                let mut dcols = vec![F::zero(); conv1.col_rows().max(conv2.col_rows()) * oh * ow];
                for s in 0..b {
                    relu_backward_inplace(g.item_mut(s), cache.block_out[i].item(s));
                    // conv2 path
                    conv2.im2col(mid.item(s), oh, ow, &mut cols2);
                    conv2.backward_params(&cols2, g.item(s), oh, ow);
                    for v in dmid.iter_mut() {
                        *v = F::zero();
                    }
                    conv2.backward_input(
                        g.item(s),
                        oh,
                        ow,
                        &mut dmid,
                        &mut dcols[..conv2.col_rows() * oh * ow],
                    );
                    relu_backward_inplace(&mut dmid, mid.item(s));
                    conv1.im2col(input.item(s), hin, win, &mut cols1);
                    conv1.backward_params(&cols1, &dmid, hin, win);
                    conv1.backward_input(
                        &dmid,
                        hin,
                        win,
                        g_prev.item_mut(s),
                        &mut dcols[..conv1.col_rows() * oh * ow],
                    );
                    match shortcut {
                        Some(sc) => {
                            let mut cols_sc = vec![F::zero(); sc.col_rows() * oh * ow];
                            sc.im2col(input.item(s), hin, win, &mut cols_sc);
                            sc.backward_params(&cols_sc, g.item(s), hin, win);
                            let mut dcols_sc = vec![F::zero(); sc.col_rows() * oh * ow];
                            sc.backward_input(
                                g.item(s),
                                hin,
                                win,
                                g_prev.item_mut(s),
                                &mut dcols_sc,
                            );
                        }
                        None => {
                            let gp = g_prev.item_mut(s);
                            for (a, &v) in gp.iter_mut().zip(g.item(s).iter()) {
                                *a += v;
                            }
                        }
                    }
                }
            }
        }
        g_prev
    }

    pub fn zero_grad(&mut self) {
        for b in self.blocks.iter_mut() {
            b.zero_grad();
        }
        self.head.zero_grad();
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = Vec::new();
        for b in self.blocks.iter_mut() {
            match b {
                Block::Conv { conv } => {
                    out.push(&mut conv.w);
                    out.push(&mut conv.b);
                }
                Block::Residual {
                    conv1,
                    conv2,
                    shortcut,
                } => {
                    out.push(&mut conv1.w);
                    out.push(&mut conv1.b);
                    out.push(&mut conv2.w);
                    out.push(&mut conv2.b);
                    if let Some(s) = shortcut {
                        out.push(&mut s.w);
                        out.push(&mut s.b);
                    }
                }
            }
        }
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }

    /// Named parameter tensors in serialization order.
    pub fn param_tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                Block::Conv { conv } => {
                    out.push((
                        format!("b{i}.conv.w"),
                        vec![conv.cout, conv.col_rows()],
                        conv.w.value.as_slice(),
                    ));
                    out.push((format!("b{i}.conv.b"), vec![conv.cout], conv.b.value.as_slice()));
                }
                Block::Residual {
                    conv1,
                    conv2,
                    shortcut,
                } => {
                    out.push((
                        format!("b{i}.conv1.w"),
                        vec![conv1.cout, conv1.col_rows()],
                        conv1.w.value.as_slice(),
                    ));
                    out.push((format!("b{i}.conv1.b"), vec![conv1.cout], conv1.b.value.as_slice()));
                    out.push((
                        format!("b{i}.conv2.w"),
                        vec![conv2.cout, conv2.col_rows()],
                        conv2.w.value.as_slice(),
                    ));
                    out.push((format!("b{i}.conv2.b"), vec![conv2.cout], conv2.b.value.as_slice()));
                    if let Some(sc) = shortcut {
                        out.push((
                            format!("b{i}.sc.w"),
                            vec![sc.cout, sc.col_rows()],
                            sc.w.value.as_slice(),
                        ));
                        out.push((format!("b{i}.sc.b"), vec![sc.cout], sc.b.value.as_slice()));
                    }
                }
            }
        }
        out.push((
            "head.w".into(),
            vec![self.head.dout, self.head.din],
            self.head.w.value.as_slice(),
        ));
        out.push(("head.b".into(), vec![self.head.dout], self.head.b.value.as_slice()));
        out
    }

    pub fn load_param_tensors(&mut self, tensors: &BTreeMap<String, Vec<F>>) -> Result<()> {
        let expected: Vec<(String, usize)> = self
            .param_tensors()
            .iter()
            .map(|(n, _, v)| (n.clone(), v.len()))
            .collect();
        for (name, len) in &expected {
            let src = tensors.get(name).ok_or_else(|| {
                Error::Validation(format!("checkpoint missing parameter {name}"))
            })?;
            if src.len() != *len {
                return Err(Error::Validation(format!(
                    "parameter {name} has {} values, expected {len}",
                    src.len()
                )));
            }
        }
        let mut idx = 0;
        for p in self.params_mut() {
            let (name, _) = &expected[idx];
            p.value.copy_from_slice(tensors.get(name).unwrap());
            idx += 1;
        }
        Ok(())
    }
}

/// `z[b, c] = mean_{spatial} map[b, c, :]`.
pub fn global_avg_pool<F: Real>(map: &Tensor<F>) -> Tensor<F> {
    let s = map.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let inv = F::of_usize(h * w).recip();
    let mut z = Tensor::zeros(&[b, c]);
    for bi in 0..b {
        let m = map.item(bi);
        let zi = z.item_mut(bi);
        for ci in 0..c {
            let mut acc = F::zero();
            for &v in &m[ci * h * w..(ci + 1) * h * w] {
                acc += v;
            }
            zi[ci] = acc * inv;
        }
    }
    z
}

fn gap_backward_add<F: Real>(
    dz: &[F],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    dmap: &mut [F],
) {
    let inv = F::of_usize(h * w).recip();
    for bi in 0..b {
        for ci in 0..c {
            let g = dz[bi * c + ci] * inv;
            let base = (bi * c + ci) * h * w;
            for v in &mut dmap[base..base + h * w] {
                *v += g;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub architecture: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Random crop (4-pixel pad) + horizontal flip during training.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            architecture: "plain8".into(),
            epochs: 12,
            batch_size: 64,
            lr: 1.5e-3,
            weight_decay: 1e-4,
            seed: 0,
            augment: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct TrainMetrics {
    pub loss_curve: Vec<f64>,
    pub final_train_accuracy: f64,
    pub clean_test_accuracy: Option<f64>,
}

/// A trained classifier plus its provenance.
#[derive(Debug, Clone)]
pub struct ClassifierState<F> {
    pub net: ClassifierNet<F>,
    pub training: TrainConfig,
    pub metrics: TrainMetrics,
}

impl<F: Real> ClassifierState<F> {
    pub fn architecture_id(&self) -> &str {
        &self.net.arch.id
    }

    pub fn num_layers(&self) -> usize {
        self.net.num_layers()
    }

    pub fn num_classes(&self) -> usize {
        self.net.num_classes
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.net.layer_dims
    }

    /// Tap-instrumented forward pass; one trace per input.
    pub fn forward_trace(&self, x: &Tensor<F>) -> Result<Vec<LayerTrace<F>>> {
        self.net.check_input(x)?;
        let cache = self.net.forward(x);
        Ok(self.net.traces(&cache))
    }

    pub fn predict(&self, x: &Tensor<F>) -> Result<Vec<u32>> {
        self.net.check_input(x)?;
        let cache = self.net.forward(x);
        let b = x.len();
        Ok((0..b)
            .map(|s| argmax(cache.logits.item(s)) as u32)
            .collect())
    }

    pub fn accuracy(&self, split: &crate::data::DatasetSplit<F>, batch: usize) -> f64 {
        let n = split.n();
        if n == 0 {
            return 0.0;
        }
        let mut correct = 0usize;
        let mut i = 0;
        while i < n {
            let j = (i + batch).min(n);
            let idx: Vec<usize> = (i..j).collect();
            let x = split.images.gather(&idx);
            let preds = self.predict(&x).expect("shape checked");
            for (k, &p) in preds.iter().enumerate() {
                if p == split.labels[i + k] {
                    correct += 1;
                }
            }
            i = j;
        }
        correct as f64 / n as f64
    }
}

/// Per-sample cross-entropy losses and logit cotangents
/// (`d logits = probs - one_hot`, unscaled).
pub fn ce_loss_and_grad<F: Real>(
    logits: &Tensor<F>,
    labels: &[u32],
) -> (Vec<F>, Tensor<F>) {
    let b = logits.len();
    let c = logits.stride0();
    debug_assert_eq!(labels.len(), b);
    let mut losses = Vec::with_capacity(b);
    let mut dl = Tensor::zeros(&[b, c]);
    for s in 0..b {
        let row = logits.item(s);
        let y = labels[s] as usize;
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for &v in row {
            sum += (v - m).exp();
        }
        let lse = m + sum.ln();
        losses.push(lse - row[y]);
        let d = dl.item_mut(s);
        for (j, &v) in row.iter().enumerate() {
            d[j] = (v - m).exp() / sum;
        }
        d[y] -= F::one();
    }
    (losses, dl)
}

/// Train a registered architecture. Deterministic given the config seed.
pub fn train_classifier<F: Real>(
    train: &crate::data::DatasetSplit<F>,
    eval: Option<&crate::data::DatasetSplit<F>>,
    cfg: &TrainConfig,
) -> Result<ClassifierState<F>> {
    let arch = registry()
        .get(&cfg.architecture)
        .cloned()
        .ok_or_else(|| Error::Config(format!("unknown architecture {:?}", cfg.architecture)))?;
    if train.n() == 0 {
        return Err(Error::Config("empty training split".into()));
    }
    let (c, h, w) = train.image_shape();
    let mut init_rng = SeedStream::new(cfg.seed, "classifier-init");
    let mut net = ClassifierNet::new(&arch, (c, h, w), train.num_classes, &mut init_rng)?;

    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut shuffle_rng = SeedStream::new(cfg.seed, "classifier-shuffle");
    let mut aug_rng = SeedStream::new(cfg.seed, "classifier-augment");
    let mut loss_curve = Vec::with_capacity(cfg.epochs);

    for _epoch in 0..cfg.epochs {
        let order = shuffle_rng.shuffled_indices(train.n());
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut x = train.images.gather(chunk);
            if cfg.augment {
                augment_batch(&mut x, &mut aug_rng);
            }
            let labels: Vec<u32> = chunk.iter().map(|&i| train.labels[i]).collect();
            let cache = net.forward(&x);
            let (losses, mut dl) = ce_loss_and_grad(&cache.logits, &labels);
            let bsz = chunk.len();
            let scale = F::of_usize(bsz).recip();
            for v in dl.data_mut() {
                *v = *v * scale;
            }
            epoch_loss += losses.iter().map(|l| l.as_f64()).sum::<f64>();
            seen += bsz;
            net.zero_grad();
            net.backward_train(&cache, &dl);
            opt.tick();
            for p in net.params_mut() {
                opt.step_param(p);
            }
        }
        let mean_loss = epoch_loss / seen.max(1) as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Training(format!(
                "loss diverged (epoch {_epoch}: {mean_loss})"
            )));
        }
        loss_curve.push(mean_loss);
    }

    let mut state = ClassifierState {
        net,
        training: cfg.clone(),
        metrics: TrainMetrics::default(),
    };
    state.metrics.loss_curve = loss_curve;
    state.metrics.final_train_accuracy = state.accuracy(train, 128);
    if let Some(ev) = eval {
        state.metrics.clean_test_accuracy = Some(state.accuracy(ev, 128));
    }

    let floor = 1.0 / train.num_classes as f64 + 0.05;
    if state.metrics.final_train_accuracy < floor {
        return Err(Error::Training(format!(
            "final train accuracy {:.4} below floor {:.4}; loss curve tail {:?}",
            state.metrics.final_train_accuracy,
            floor,
            state
                .metrics
                .loss_curve
                .iter()
                .rev()
                .take(3)
                .collect::<Vec<_>>()
        )));
    }
    Ok(state)
}

/// Random pad-and-crop plus horizontal flip, in place. The pad is h/8
/// (4 pixels at CIFAR scale), at least 1.
fn augment_batch<F: Real>(x: &mut Tensor<F>, rng: &mut SeedStream) {
    let s = x.shape().to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let pad = (h / 8).max(1);
    let mut tmp = vec![F::zero(); c * h * w];
    for bi in 0..b {
        let dy = rng.below(2 * pad + 1) as isize - pad as isize;
        let dx = rng.below(2 * pad + 1) as isize - pad as isize;
        let flip = rng.below(2) == 1;
        let img = x.item_mut(bi);
        tmp.copy_from_slice(img);
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let sy = y as isize + dy;
                    let sx_raw = xx as isize + dx;
                    let sx = if flip { w as isize - 1 - sx_raw } else { sx_raw };
                    let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        tmp[ci * h * w + sy as usize * w + sx as usize]
                    } else {
                        F::zero()
                    };
                    img[ci * h * w + y * w + xx] = v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, DatasetSource, SyntheticSpec};

    fn tiny_net(seed: u64) -> ClassifierNet<f64> {
        let arch = ArchDef {
            id: "test3".into(),
            blocks: vec![conv_def(4, 1), res_def(6, 2), conv_def(6, 1)],
        };
        let mut rng = SeedStream::new(seed, "tiny-net");
        ClassifierNet::new(&arch, (2, 6, 6), 3, &mut rng).unwrap()
    }

    fn random_batch(seed: u64, b: usize) -> Tensor<f64> {
        let mut rng = SeedStream::new(seed, "batch");
        let mut t = Tensor::zeros(&[b, 2, 6, 6]);
        for v in t.data_mut() {
            *v = rng.uniform_f64();
        }
        t
    }

    #[test]
    fn trace_invariants_hold() {
        let net = tiny_net(0);
        let x = random_batch(1, 3);
        let cache = net.forward(&x);
        for t in net.traces(&cache) {
            let sum: f64 = t.probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(t.probs.iter().all(|&p| p >= 0.0));
            assert_eq!(t.predicted, argmax(&t.probs));
            assert!(t.entropy() <= (net.num_classes as f64).ln() + 1e-9);
            // Spot-check softmax(logits) == probs.
            let p = softmax(&t.logits);
            for (a, b) in p.iter().zip(t.probs.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
            assert_eq!(t.z.len(), net.num_layers());
            for (zi, &d) in t.z.iter().zip(net.layer_dims.iter()) {
                assert_eq!(zi.len(), d);
            }
        }
    }

    #[test]
    fn forward_is_pure_and_batch_independent() {
        let net = tiny_net(3);
        let x = random_batch(2, 2);
        // Duplicate the batch: [x0, x1, x0, x1]
        let dup = x.gather(&[0, 1, 0, 1]);
        let t1 = net.traces(&net.forward(&x));
        let t2 = net.traces(&net.forward(&dup));
        for s in 0..2 {
            assert_eq!(t1[s].logits, t2[s].logits);
            assert_eq!(t1[s].logits, t2[s + 2].logits);
            assert_eq!(t1[s].z, t2[s + 2].z);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        // d(sum of logits)/dx on a small model, central differences h=1e-4.
        let arch = ArchDef {
            id: "micro".into(),
            blocks: vec![conv_def(2, 1), conv_def(3, 1), conv_def(3, 1)],
        };
        let mut rng = SeedStream::new(9, "micro");
        let net: ClassifierNet<f64> = ClassifierNet::new(&arch, (1, 2, 2), 2, &mut rng).unwrap();
        let mut x = Tensor::zeros(&[1, 1, 2, 2]);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = 0.3 + 0.1 * i as f64;
        }

        let sum_logits = |x: &Tensor<f64>| -> f64 {
            let cache = net.forward(x);
            cache.logits.data().iter().sum()
        };

        let cache = net.forward(&x);
        let d_logits = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]);
        let d_z: Vec<Option<Tensor<f64>>> = vec![None, None, None];
        let dx = net.backward_input(&cache, &d_z, Some(&d_logits));

        let h = 1e-4;
        for i in 0..4 {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (sum_logits(&xp) - sum_logits(&xm)) / (2.0 * h);
            let got = dx.data()[i];
            let denom = fd.abs().max(1e-8);
            assert!(
                ((got - fd).abs() / denom) < 1e-3,
                "pixel {i}: analytic {got} vs fd {fd}"
            );
        }
    }

    #[test]
    fn tap_cotangents_match_finite_differences() {
        // phi = sum_i <c_i, z_i> for random weights c_i, through a residual
        // net to also exercise the shortcut adjoints.
        let net = tiny_net(4);
        let x = random_batch(7, 2);
        let mut wrng = SeedStream::new(12, "tap-weights");
        let weights: Vec<Tensor<f64>> = net
            .layer_dims
            .iter()
            .map(|&d| {
                let mut t = Tensor::zeros(&[2, d]);
                for v in t.data_mut() {
                    *v = wrng.uniform(-1.0, 1.0);
                }
                t
            })
            .collect();

        let phi = |x: &Tensor<f64>| -> f64 {
            let cache = net.forward(x);
            let mut acc = 0.0;
            for (zi, wi) in cache.z.iter().zip(weights.iter()) {
                for (a, b) in zi.data().iter().zip(wi.data().iter()) {
                    acc += a * b;
                }
            }
            acc
        };

        let cache = net.forward(&x);
        let d_z: Vec<Option<Tensor<f64>>> = weights.iter().map(|w| Some(w.clone())).collect();
        let dx = net.backward_input(&cache, &d_z, None);

        let h = 1e-5;
        for i in (0..x.numel()).step_by(17) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (phi(&xp) - phi(&xm)) / (2.0 * h);
            let got = dx.data()[i];
            assert!(
                (got - fd).abs() < 1e-6 + 1e-3 * fd.abs(),
                "pixel {i}: {got} vs {fd}"
            );
        }
    }

    fn separable_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n: 360,
            classes: 2,
            h: 8,
            w: 8,
            seed,
            channels: 3,
            template_amp: 0.45,
            noise_sd: 0.08,
            split: Some((240, 60, 60)),
        }
    }

    #[test]
    fn trains_separable_two_class_data() {
        let ds = load_dataset::<f32>(&DatasetSource::Synthetic(separable_spec(0))).unwrap();
        let cfg = TrainConfig {
            architecture: "plain3".into(),
            epochs: 6,
            batch_size: 32,
            lr: 2e-3,
            weight_decay: 1e-4,
            seed: 0,
            augment: false,
        };
        let state = train_classifier(&ds.train, Some(&ds.test), &cfg).unwrap();
        assert!(
            state.metrics.final_train_accuracy >= 0.95,
            "train acc {}",
            state.metrics.final_train_accuracy
        );
        assert!(state.metrics.clean_test_accuracy.unwrap() >= 0.95);
        // Training loss decreased overall.
        let c = &state.metrics.loss_curve;
        assert!(c.last().unwrap() < c.first().unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = load_dataset::<f32>(&DatasetSource::Synthetic(separable_spec(1))).unwrap();
        let cfg = TrainConfig {
            architecture: "plain3".into(),
            epochs: 4,
            batch_size: 32,
            lr: 2e-3,
            weight_decay: 1e-4,
            seed: 42,
            augment: false,
        };
        let a = train_classifier(&ds.train, None, &cfg).unwrap();
        let b = train_classifier(&ds.train, None, &cfg).unwrap();
        for ((_, _, pa), (_, _, pb)) in a.net.param_tensors().iter().zip(b.net.param_tensors()) {
            assert_eq!(*pa, pb, "parameters differ between identical runs");
        }
        assert_eq!(a.metrics.loss_curve, b.metrics.loss_curve);
    }

    #[test]
    fn crop_flip_augmentation_is_seeded() {
        let mut rng = SeedStream::new(7, "aug");
        let mut a = random_batch(2, 3).cast::<f32>();
        let mut b = a.clone();
        let before = a.clone();
        augment_batch(&mut a, &mut SeedStream::new(9, "x"));
        augment_batch(&mut b, &mut SeedStream::new(9, "x"));
        assert_eq!(a.data(), b.data());
        let mut c = before.clone();
        augment_batch(&mut c, &mut rng);
        assert_ne!(c.data(), before.data());
    }

    #[test]
    fn non_converging_run_reports_training_failure() {
        let ds = load_dataset::<f32>(&DatasetSource::Synthetic(separable_spec(2))).unwrap();
        // lr = 0 leaves the net at its random init, well below the accuracy
        // floor on 2 classes.
        let cfg = TrainConfig {
            architecture: "plain3".into(),
            epochs: 1,
            batch_size: 32,
            lr: 0.0,
            weight_decay: 0.0,
            seed: 3,
            augment: false,
        };
        match train_classifier(&ds.train, None, &cfg) {
            Err(Error::Training(msg)) => assert!(msg.contains("accuracy")),
            other => panic!("expected training failure, got {other:?}"),
        }
    }

    #[test]
    fn unknown_architecture_is_config_error() {
        let ds = load_dataset::<f32>(&DatasetSource::Synthetic(separable_spec(3))).unwrap();
        let cfg = TrainConfig {
            architecture: "nope".into(),
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_classifier(&ds.train, None, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let net = tiny_net(5);
        let state = ClassifierState {
            net,
            training: TrainConfig::default(),
            metrics: TrainMetrics::default(),
        };
        let bad = Tensor::<f64>::zeros(&[1, 2, 5, 5]);
        assert!(matches!(
            state.forward_trace(&bad),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn registry_has_at_least_two_architectures() {
        let r = registry();
        assert!(r.len() >= 2);
        assert!(r.contains_key("plain8"));
        assert!(r.contains_key("res8"));
        for arch in r.values() {
            assert!(arch.num_layers() >= 3);
        }
    }
}
