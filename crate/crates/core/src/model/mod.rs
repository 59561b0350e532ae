//! From-scratch densely-connected CNN: BN-ReLU-Conv dense layers with
//! channel concatenation, 1x1-conv + average-pool transitions, and a
//! GAP -> FC -> sigmoid head, trained with SGD + momentum on binary
//! cross-entropy.
//!
//! Parameters live in one flat `Vec<f64>` in declaration order (stem, then
//! each block's BN/conv pairs, transitions in between, FC last), which
//! makes the optimizer, checkpoints and finite-difference verification
//! straightforward. Batch-norm running statistics are state, not
//! parameters; they update only in training mode.

pub mod gradcheck;
pub mod ops;

use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::seed;

use ops::{
    avgpool2_backward, avgpool2_forward, batchnorm_backward, batchnorm_forward_eval,
    batchnorm_forward_train, conv2d_backward, conv2d_forward, fc_backward, fc_forward,
    gap_backward, gap_forward, relu_backward_inplace, relu_forward, Act, BnCache,
};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Probabilities are clipped to [PROB_CLIP, 1 - PROB_CLIP] inside the loss.
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseBlockSpec {
    pub layers: usize,
    pub growth: usize,
}

/// Architecture: stem 3x3 conv, dense blocks with 1x1-conv-halving + 2x2
/// average-pool transitions between them, then GAP -> FC -> sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// (channels, height, width) of one input image.
    pub input: (usize, usize, usize),
    pub stem_channels: usize,
    pub blocks: Vec<DenseBlockSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input: (1, 64, 64),
            stem_channels: 8,
            blocks: vec![
                DenseBlockSpec { layers: 4, growth: 4 },
                DenseBlockSpec { layers: 4, growth: 4 },
            ],
        }
    }
}

#[derive(Debug, Clone)]
struct ConvDesc {
    out_c: usize,
    k: usize,
    pad: usize,
    w_off: usize,
    w_len: usize,
    b_off: usize,
}

#[derive(Debug, Clone)]
struct BnDesc {
    c: usize,
    gamma_off: usize,
    beta_off: usize,
    /// Offset into the running-stats vector: mean at run_off, variance at
    /// run_off + c.
    run_off: usize,
}

#[derive(Debug, Clone)]
struct LayerDesc {
    bn: BnDesc,
    conv: ConvDesc,
}

#[derive(Debug, Clone)]
struct TransitionDesc {
    bn: BnDesc,
    conv: ConvDesc,
}

#[derive(Debug, Clone)]
struct FcDesc {
    in_c: usize,
    w_off: usize,
    b_off: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum RegionKind {
    ConvWeight { fan_in: usize },
    ConvBias,
    BnGamma,
    BnBeta,
    FcWeight,
    FcBias,
}

#[derive(Debug, Clone)]
struct Region {
    name: String,
    range: Range<usize>,
    kind: RegionKind,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: ConvDesc,
    blocks: Vec<Vec<LayerDesc>>,
    transitions: Vec<TransitionDesc>,
    fc: FcDesc,
    n_params: usize,
    n_running: usize,
    regions: Vec<Region>,
}

struct LayoutBuilder {
    p: usize,
    r: usize,
    regions: Vec<Region>,
}

impl LayoutBuilder {
    fn conv(&mut self, name: &str, in_c: usize, out_c: usize, k: usize, pad: usize) -> ConvDesc {
        let w_len = out_c * in_c * k * k;
        let w_off = self.p;
        self.regions.push(Region {
            name: format!("{name}.weight"),
            range: w_off..w_off + w_len,
            kind: RegionKind::ConvWeight { fan_in: in_c * k * k },
        });
        self.p += w_len;
        let b_off = self.p;
        self.regions.push(Region {
            name: format!("{name}.bias"),
            range: b_off..b_off + out_c,
            kind: RegionKind::ConvBias,
        });
        self.p += out_c;
        ConvDesc {
            out_c,
            k,
            pad,
            w_off,
            w_len,
            b_off,
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnDesc {
        let gamma_off = self.p;
        self.regions.push(Region {
            name: format!("{name}.gamma"),
            range: gamma_off..gamma_off + c,
            kind: RegionKind::BnGamma,
        });
        self.p += c;
        let beta_off = self.p;
        self.regions.push(Region {
            name: format!("{name}.beta"),
            range: beta_off..beta_off + c,
            kind: RegionKind::BnBeta,
        });
        self.p += c;
        let run_off = self.r;
        self.r += 2 * c;
        BnDesc {
            c,
            gamma_off,
            beta_off,
            run_off,
        }
    }
}

impl Layout {
    fn build(config: &ModelConfig) -> Result<Layout> {
        let (in_c, h, w) = config.input;
        if in_c == 0 || h < 2 || w < 2 {
            return Err(Error::Config(format!(
                "input shape ({in_c}, {h}, {w}) is degenerate"
            )));
        }
        if config.stem_channels == 0 {
            return Err(Error::Config("stem must produce at least one channel".into()));
        }
        if config.blocks.is_empty() {
            return Err(Error::Config("need at least one dense block".into()));
        }
        for (i, b) in config.blocks.iter().enumerate() {
            if b.layers == 0 || b.growth == 0 {
                return Err(Error::Config(format!(
                    "block {} needs positive layer count and growth",
                    i + 1
                )));
            }
        }

        let mut lb = LayoutBuilder {
            p: 0,
            r: 0,
            regions: Vec::new(),
        };
        let stem = lb.conv("stem.conv", in_c, config.stem_channels, 3, 1);
        let mut cur_c = config.stem_channels;
        let (mut cur_h, mut cur_w) = (h, w);
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (bi, spec) in config.blocks.iter().enumerate() {
            let mut layers = Vec::new();
            for li in 0..spec.layers {
                let c_in = cur_c + li * spec.growth;
                let name = format!("block{}.layer{}", bi + 1, li + 1);
                let bn = lb.bn(&format!("{name}.bn"), c_in);
                let conv = lb.conv(&format!("{name}.conv"), c_in, spec.growth, 3, 1);
                layers.push(LayerDesc { bn, conv });
            }
            cur_c += spec.layers * spec.growth;
            blocks.push(layers);
            if bi + 1 < config.blocks.len() {
                let out_c = cur_c / 2;
                if out_c == 0 {
                    return Err(Error::Config(
                        "transition halving leaves zero channels".into(),
                    ));
                }
                let name = format!("transition{}", bi + 1);
                let bn = lb.bn(&format!("{name}.bn"), cur_c);
                let conv = lb.conv(&format!("{name}.conv"), cur_c, out_c, 1, 0);
                transitions.push(TransitionDesc { bn, conv });
                cur_c = out_c;
                cur_h /= 2;
                cur_w /= 2;
                if cur_h == 0 || cur_w == 0 {
                    return Err(Error::Config(
                        "spatial size vanishes before the head".into(),
                    ));
                }
            }
        }
        let fc_w_off = lb.p;
        lb.regions.push(Region {
            name: "fc.weight".into(),
            range: fc_w_off..fc_w_off + cur_c,
            kind: RegionKind::FcWeight,
        });
        lb.p += cur_c;
        let fc_b_off = lb.p;
        lb.regions.push(Region {
            name: "fc.bias".into(),
            range: fc_b_off..fc_b_off + 1,
            kind: RegionKind::FcBias,
        });
        lb.p += 1;

        Ok(Layout {
            stem,
            blocks,
            transitions,
            fc: FcDesc {
                in_c: cur_c,
                w_off: fc_w_off,
                b_off: fc_b_off,
            },
            n_params: lb.p,
            n_running: lb.r,
            regions: lb.regions,
        })
    }

    fn all_bns(&self) -> Vec<&BnDesc> {
        let mut v: Vec<&BnDesc> = Vec::new();
        for (bi, layers) in self.blocks.iter().enumerate() {
            for l in layers {
                v.push(&l.bn);
            }
            if bi < self.transitions.len() {
                v.push(&self.transitions[bi].bn);
            }
        }
        v
    }

    fn region_name(&self, idx: usize) -> &str {
        self.regions
            .iter()
            .find(|r| r.range.contains(&idx))
            .map(|r| r.name.as_str())
            .unwrap_or("unknown")
    }
}

/// The network: architecture config, flat trainable parameters, and
/// batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    layout: Layout,
    pub params: Vec<f64>,
    pub running: Vec<f64>,
}

/// He-uniform kernels, zero conv biases, BN gamma 1 / beta 0, zero FC head
/// (an untrained model therefore outputs exactly 0.5), running mean 0 /
/// variance 1. Deterministic per seed.
pub fn build_model(config: &ModelConfig, model_seed: u64) -> Result<Model> {
    let layout = Layout::build(config)?;
    let mut params = vec![0.0; layout.n_params];
    let mut rng = ChaCha8Rng::seed_from_u64(model_seed);
    for region in &layout.regions {
        match region.kind {
            RegionKind::ConvWeight { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                for i in region.range.clone() {
                    params[i] = rng.random_range(-bound..bound);
                }
            }
            RegionKind::BnGamma => {
                for i in region.range.clone() {
                    params[i] = 1.0;
                }
            }
            _ => {}
        }
    }
    let mut running = vec![0.0; layout.n_running];
    for bn in layout.all_bns() {
        for i in 0..bn.c {
            running[bn.run_off + bn.c + i] = 1.0; // variance
        }
    }
    Ok(Model {
        config: config.clone(),
        layout,
        params,
        running,
    })
}

fn update_running(running: &mut [f64], bn: &BnDesc, cache: &BnCache) {
    for ch in 0..bn.c {
        let m = &mut running[bn.run_off + ch];
        *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * cache.mean[ch];
        let v = &mut running[bn.run_off + bn.c + ch];
        *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * cache.var[ch];
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Mean binary cross-entropy with probabilities clipped away from 0 and 1.
pub fn loss_bce(probabilities: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(probabilities.len(), labels.len());
    assert!(!probabilities.is_empty());
    let mut sum = 0.0;
    for (&p, &y) in probabilities.iter().zip(labels) {
        let pc = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        sum -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
    }
    sum / probabilities.len() as f64
}

/// d(mean BCE)/d(logit); zero where the probability sits in the clipped
/// region (the clipped loss is flat there).
fn bce_grad_logits(probs: &[f64], labels: &[f64]) -> Vec<f64> {
    let n = probs.len() as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if p > PROB_CLIP && p < 1.0 - PROB_CLIP {
                (p - y) / n
            } else {
                0.0
            }
        })
        .collect()
}

/// Per-layer caches from a training-mode forward, consumed by
/// [`Model::backward`].
pub struct Tape {
    input: Act,
    blocks: Vec<BlockTape>,
    transitions: Vec<TransTape>,
    feat: Vec<f64>,
    pub probs: Vec<f64>,
    n: usize,
}

struct BlockTape {
    state: Act,
    layers: Vec<LayerTape>,
}

struct LayerTape {
    cache: BnCache,
    relu_out: Act,
}

struct TransTape {
    cache: BnCache,
    relu_out: Act,
    conv_h: usize,
    conv_w: usize,
}

impl Tape {
    /// Sign pattern of every ReLU activation, in deterministic order. Two
    /// forwards whose masks differ crossed a kink somewhere between them.
    pub fn relu_mask(&self) -> Vec<bool> {
        let mut mask = Vec::new();
        for (bi, b) in self.blocks.iter().enumerate() {
            for l in &b.layers {
                mask.extend(l.relu_out.data.iter().map(|&v| v > 0.0));
            }
            if bi < self.transitions.len() {
                mask.extend(self.transitions[bi].relu_out.data.iter().map(|&v| v > 0.0));
            }
        }
        mask
    }
}

/// Eval-mode capture of every dense layer's input, for structural checks.
pub struct Trace {
    /// Per block, per layer: the concatenated input the layer saw.
    pub layer_inputs: Vec<Vec<Act>>,
    pub probs: Vec<f64>,
}

fn check_input(config: &ModelConfig, images: &Act, min_n: usize, what: &str) -> Result<()> {
    let (c, h, w) = config.input;
    if images.c != c || images.h != h || images.w != w {
        return Err(Error::Config(format!(
            "input shape mismatch: model expects {c}x{h}x{w}, got {}x{}x{}",
            images.c, images.h, images.w
        )));
    }
    if images.n < min_n {
        return Err(Error::Config(format!(
            "{what} needs at least {min_n} image(s), got {}",
            images.n
        )));
    }
    Ok(())
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Channel count entering the FC head.
    pub fn head_channels(&self) -> usize {
        self.layout.fc.in_c
    }

    /// Replace the FC head parameters (weights length must match
    /// [`Model::head_channels`]).
    pub fn set_head(&mut self, weights: &[f64], bias: f64) -> Result<()> {
        let fc = &self.layout.fc;
        if weights.len() != fc.in_c {
            return Err(Error::Config(format!(
                "head expects {} weights, got {}",
                fc.in_c,
                weights.len()
            )));
        }
        self.params[fc.w_off..fc.w_off + fc.in_c].copy_from_slice(weights);
        self.params[fc.b_off] = bias;
        Ok(())
    }

    fn w(&self, c: &ConvDesc) -> &[f64] {
        &self.params[c.w_off..c.w_off + c.w_len]
    }

    fn b(&self, c: &ConvDesc) -> &[f64] {
        &self.params[c.b_off..c.b_off + c.out_c]
    }

    fn gamma(&self, bn: &BnDesc) -> &[f64] {
        &self.params[bn.gamma_off..bn.gamma_off + bn.c]
    }

    fn beta(&self, bn: &BnDesc) -> &[f64] {
        &self.params[bn.beta_off..bn.beta_off + bn.c]
    }

    fn run_mean(&self, bn: &BnDesc) -> &[f64] {
        &self.running[bn.run_off..bn.run_off + bn.c]
    }

    fn run_var(&self, bn: &BnDesc) -> &[f64] {
        &self.running[bn.run_off + bn.c..bn.run_off + 2 * bn.c]
    }

    /// Training-mode forward: batch statistics in every BN (running stats
    /// are updated), caches retained for [`Model::backward`]. Requires a
    /// batch of at least two images.
    pub fn forward_train(&mut self, images: &Act) -> Result<(Vec<f64>, Tape)> {
        check_input(&self.config, images, 2, "train-mode batch")?;
        let n = images.n;

        let stem_out = {
            let sd = &self.layout.stem;
            conv2d_forward(&images.view(), self.w(sd), self.b(sd), sd.out_c, sd.k, sd.pad)
        };

        let mut blocks_tape: Vec<BlockTape> = Vec::new();
        let mut trans_tape: Vec<TransTape> = Vec::new();
        let mut cur = stem_out;
        let n_blocks = self.layout.blocks.len();
        for bi in 0..n_blocks {
            let growth = self.config.blocks[bi].growth;
            let n_layers = self.layout.blocks[bi].len();
            let c_final = cur.c + n_layers * growth;
            let mut state = Act::zeros(n, c_final, cur.h, cur.w);
            state.write_channels(0, &cur);
            let mut layer_tapes = Vec::new();
            let mut c_j = cur.c;
            for li in 0..n_layers {
                let ld = self.layout.blocks[bi][li].clone();
                let (bn_out, cache) = {
                    let xv = state.prefix(c_j);
                    batchnorm_forward_train(&xv, self.gamma(&ld.bn), self.beta(&ld.bn), BN_EPS)
                };
                update_running(&mut self.running, &ld.bn, &cache);
                let act = relu_forward(bn_out);
                let y = conv2d_forward(
                    &act.view(),
                    self.w(&ld.conv),
                    self.b(&ld.conv),
                    ld.conv.out_c,
                    ld.conv.k,
                    ld.conv.pad,
                );
                state.write_channels(c_j, &y);
                layer_tapes.push(LayerTape {
                    cache,
                    relu_out: act,
                });
                c_j += growth;
            }
            if bi + 1 < n_blocks {
                let td = self.layout.transitions[bi].clone();
                let (bn_out, cache) =
                    batchnorm_forward_train(&state.view(), self.gamma(&td.bn), self.beta(&td.bn), BN_EPS);
                update_running(&mut self.running, &td.bn, &cache);
                let act = relu_forward(bn_out);
                let convd = conv2d_forward(
                    &act.view(),
                    self.w(&td.conv),
                    self.b(&td.conv),
                    td.conv.out_c,
                    td.conv.k,
                    td.conv.pad,
                );
                let pooled = avgpool2_forward(&convd);
                trans_tape.push(TransTape {
                    cache,
                    relu_out: act,
                    conv_h: convd.h,
                    conv_w: convd.w,
                });
                cur = pooled;
            }
            blocks_tape.push(BlockTape {
                state,
                layers: layer_tapes,
            });
        }

        let final_state = &blocks_tape.last().expect("blocks").state;
        let feat = gap_forward(final_state);
        let fcd = &self.layout.fc;
        let logits = fc_forward(
            &feat,
            n,
            fcd.in_c,
            &self.params[fcd.w_off..fcd.w_off + fcd.in_c],
            self.params[fcd.b_off],
        );
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let tape = Tape {
            input: images.clone(),
            blocks: blocks_tape,
            transitions: trans_tape,
            feat,
            probs: probs.clone(),
            n,
        };
        Ok((probs, tape))
    }

    /// Eval-mode forward using running BN statistics. Any batch size >= 1.
    pub fn forward_eval(&self, images: &Act) -> Result<Vec<f64>> {
        self.eval_flow(images, None, None)
    }

    /// Eval-mode forward that captures every dense layer's input; when
    /// `ablate` names a (block, layer), that layer's conv output is zeroed
    /// before concatenation.
    pub fn forward_traced(&self, images: &Act, ablate: Option<(usize, usize)>) -> Result<Trace> {
        let mut inputs: Vec<Vec<Act>> = Vec::new();
        let probs = self.eval_flow(images, ablate, Some(&mut inputs))?;
        Ok(Trace {
            layer_inputs: inputs,
            probs,
        })
    }

    fn eval_flow(
        &self,
        images: &Act,
        ablate: Option<(usize, usize)>,
        mut capture: Option<&mut Vec<Vec<Act>>>,
    ) -> Result<Vec<f64>> {
        check_input(&self.config, images, 1, "eval batch")?;
        let n = images.n;
        let sd = &self.layout.stem;
        let mut cur = conv2d_forward(&images.view(), self.w(sd), self.b(sd), sd.out_c, sd.k, sd.pad);
        let n_blocks = self.layout.blocks.len();
        let mut final_state: Option<Act> = None;
        for bi in 0..n_blocks {
            let growth = self.config.blocks[bi].growth;
            let layers = &self.layout.blocks[bi];
            let c_final = cur.c + layers.len() * growth;
            let mut state = Act::zeros(n, c_final, cur.h, cur.w);
            state.write_channels(0, &cur);
            if let Some(cap) = capture.as_deref_mut() {
                cap.push(Vec::new());
            }
            let mut c_j = cur.c;
            for (li, ld) in layers.iter().enumerate() {
                if let Some(cap) = capture.as_deref_mut() {
                    cap[bi].push(state.truncate_channels(c_j));
                }
                let bn_out = {
                    let xv = state.prefix(c_j);
                    batchnorm_forward_eval(
                        &xv,
                        self.gamma(&ld.bn),
                        self.beta(&ld.bn),
                        self.run_mean(&ld.bn),
                        self.run_var(&ld.bn),
                        BN_EPS,
                    )
                };
                let act = relu_forward(bn_out);
                let mut y = conv2d_forward(
                    &act.view(),
                    self.w(&ld.conv),
                    self.b(&ld.conv),
                    ld.conv.out_c,
                    ld.conv.k,
                    ld.conv.pad,
                );
                if ablate == Some((bi, li)) {
                    y.data.fill(0.0);
                }
                state.write_channels(c_j, &y);
                c_j += growth;
            }
            if bi + 1 < n_blocks {
                let td = &self.layout.transitions[bi];
                let bn_out = batchnorm_forward_eval(
                    &state.view(),
                    self.gamma(&td.bn),
                    self.beta(&td.bn),
                    self.run_mean(&td.bn),
                    self.run_var(&td.bn),
                    BN_EPS,
                );
                let act = relu_forward(bn_out);
                let convd = conv2d_forward(
                    &act.view(),
                    self.w(&td.conv),
                    self.b(&td.conv),
                    td.conv.out_c,
                    td.conv.k,
                    td.conv.pad,
                );
                cur = avgpool2_forward(&convd);
            } else {
                final_state = Some(state);
            }
        }
        let state = final_state.expect("final block state");
        let feat = gap_forward(&state);
        let fcd = &self.layout.fc;
        let logits = fc_forward(
            &feat,
            n,
            fcd.in_c,
            &self.params[fcd.w_off..fcd.w_off + fcd.in_c],
            self.params[fcd.b_off],
        );
        Ok(logits.iter().map(|&z| sigmoid(z)).collect())
    }

    /// Exact gradients of mean BCE for every parameter, in parameter order.
    /// Concatenation gradients split back to their source layers; batch
    /// norm is differentiated through its batch statistics.
    pub fn backward(&self, tape: &Tape, labels: &[f64]) -> Result<Vec<f64>> {
        if labels.len() != tape.n {
            return Err(Error::Config(format!(
                "got {} labels for a batch of {}",
                labels.len(),
                tape.n
            )));
        }
        let mut grads = vec![0.0; self.params.len()];

        let dlogits = bce_grad_logits(&tape.probs, labels);
        let fcd = &self.layout.fc;
        let final_state = &tape.blocks.last().expect("blocks").state;
        let (dfeat, dw_fc, db_fc) = fc_backward(
            &tape.feat,
            tape.n,
            fcd.in_c,
            &self.params[fcd.w_off..fcd.w_off + fcd.in_c],
            &dlogits,
        );
        grads[fcd.w_off..fcd.w_off + fcd.in_c].copy_from_slice(&dw_fc);
        grads[fcd.b_off] = db_fc;

        let mut dcur = gap_backward(&dfeat, tape.n, final_state.c, final_state.h, final_state.w);

        for bi in (0..self.layout.blocks.len()).rev() {
            let btape = &tape.blocks[bi];
            let layers = &self.layout.blocks[bi];
            let growth = self.config.blocks[bi].growth;
            let mut d_state = std::mem::replace(&mut dcur, Act::zeros(0, 0, 1, 1));
            debug_assert_eq!(d_state.c, btape.state.c);
            let mut c_j = btape.state.c;
            for (li, ld) in layers.iter().enumerate().rev() {
                c_j -= growth;
                let d_y = d_state.extract_channels(c_j, growth);
                let lt = &btape.layers[li];
                let (mut d_act, dw, db) = conv2d_backward(
                    &lt.relu_out.view(),
                    self.w(&ld.conv),
                    &d_y,
                    ld.conv.k,
                    ld.conv.pad,
                );
                grads[ld.conv.w_off..ld.conv.w_off + ld.conv.w_len].copy_from_slice(&dw);
                grads[ld.conv.b_off..ld.conv.b_off + ld.conv.out_c].copy_from_slice(&db);
                relu_backward_inplace(&mut d_act, &lt.relu_out);
                let (dx, dgamma, dbeta) = {
                    let xv = btape.state.prefix(c_j);
                    batchnorm_backward(&xv, &lt.cache, self.gamma(&ld.bn), &d_act, BN_EPS)
                };
                grads[ld.bn.gamma_off..ld.bn.gamma_off + ld.bn.c].copy_from_slice(&dgamma);
                grads[ld.bn.beta_off..ld.bn.beta_off + ld.bn.c].copy_from_slice(&dbeta);
                d_state.add_into_prefix(&dx);
            }
            let d_block_in = d_state.truncate_channels(c_j);
            if bi > 0 {
                let td = &self.layout.transitions[bi - 1];
                let tt = &tape.transitions[bi - 1];
                let prev_state = &tape.blocks[bi - 1].state;
                let d_conv = avgpool2_backward(&d_block_in, tt.conv_h, tt.conv_w);
                let (mut d_act, dw, db) = conv2d_backward(
                    &tt.relu_out.view(),
                    self.w(&td.conv),
                    &d_conv,
                    td.conv.k,
                    td.conv.pad,
                );
                grads[td.conv.w_off..td.conv.w_off + td.conv.w_len].copy_from_slice(&dw);
                grads[td.conv.b_off..td.conv.b_off + td.conv.out_c].copy_from_slice(&db);
                relu_backward_inplace(&mut d_act, &tt.relu_out);
                let (dx, dgamma, dbeta) =
                    batchnorm_backward(&prev_state.view(), &tt.cache, self.gamma(&td.bn), &d_act, BN_EPS);
                grads[td.bn.gamma_off..td.bn.gamma_off + td.bn.c].copy_from_slice(&dgamma);
                grads[td.bn.beta_off..td.bn.beta_off + td.bn.c].copy_from_slice(&dbeta);
                dcur = dx;
            } else {
                let sd = &self.layout.stem;
                let (_dx, dw, db) =
                    conv2d_backward(&tape.input.view(), self.w(sd), &d_block_in, sd.k, sd.pad);
                grads[sd.w_off..sd.w_off + sd.w_len].copy_from_slice(&dw);
                grads[sd.b_off..sd.b_off + sd.out_c].copy_from_slice(&db);
            }
        }

        for region in &self.layout.regions {
            if grads[region.range.clone()].iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    layer: region.name.clone(),
                });
            }
        }
        Ok(grads)
    }

    /// Probabilities for a set of single-channel images, eval mode,
    /// chunked to bound memory.
    pub fn predict_batch(&self, images: &[Array2<f64>]) -> Result<Vec<f64>> {
        let mut probs = Vec::with_capacity(images.len());
        for chunk in images.chunks(128) {
            let batch = pack_images(chunk)?;
            probs.extend(self.forward_eval(&batch)?);
        }
        Ok(probs)
    }

    /// Single-image prediction. The label is abnormal iff the probability
    /// is >= threshold.
    pub fn predict(&self, image: &Array2<f64>, threshold: f64) -> Result<Prediction> {
        let probability = self.predict_batch(std::slice::from_ref(image))?[0];
        Ok(Prediction {
            probability,
            label: if probability >= threshold {
                Label::Abnormal
            } else {
                Label::Normal
            },
        })
    }

    pub(crate) fn region_name(&self, idx: usize) -> &str {
        self.layout.region_name(idx)
    }

    pub(crate) fn regions(&self) -> impl Iterator<Item = (&str, Range<usize>)> {
        self.layout
            .regions
            .iter()
            .map(|r| (r.name.as_str(), r.range.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub probability: f64,
    pub label: Label,
}

fn pack_images(images: &[Array2<f64>]) -> Result<Act> {
    if images.is_empty() {
        return Err(Error::Config("empty image batch".into()));
    }
    let (h, w) = images[0].dim();
    let mut act = Act::zeros(images.len(), 1, h, w);
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (h, w) {
            return Err(Error::Config("inconsistent image sizes in batch".into()));
        }
        let dst = act.image_mut(i);
        for (d, &s) in dst.iter_mut().zip(img.iter()) {
            *d = s;
        }
    }
    Ok(act)
}

/// Classic momentum SGD: v <- momentum*v + g; p <- p - lr*v.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    velocity: Vec<f64>,
}

impl SgdMomentum {
    pub fn new(n_params: usize) -> SgdMomentum {
        SgdMomentum {
            velocity: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, momentum: f64) {
        assert_eq!(params.len(), self.velocity.len());
        assert_eq!(params.len(), grads.len());
        for ((p, v), &g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

/// One optimizer step against a model.
pub fn sgd_step(model: &mut Model, opt: &mut SgdMomentum, grads: &[f64], lr: f64, momentum: f64) {
    opt.step(&mut model.params, grads, lr, momentum);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be >= 2 (batch norm)".into()));
        }
        // lr = 0 is a legal no-op run (parameters frozen, BN stats move)
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for (i, e) in self.epochs.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                i + 1,
                e.train_loss,
                e.train_acc,
                e.val_loss,
                e.val_acc
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<TrainHistory> {
        let mut epochs = Vec::new();
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Data(format!("history csv line {} malformed", ln + 1)));
            }
            let f = |i: usize| -> Result<f64> {
                fields[i]
                    .parse()
                    .map_err(|e| Error::Data(format!("history csv line {}: {e}", ln + 1)))
            };
            epochs.push(EpochStats {
                train_loss: f(1)?,
                train_acc: f(2)?,
                val_loss: f(3)?,
                val_acc: f(4)?,
            });
        }
        Ok(TrainHistory { epochs })
    }

    pub fn best_val_epoch(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.epochs.iter().enumerate() {
            if best.is_none_or(|(_, acc)| e.val_acc > acc) {
                best = Some((i, e.val_acc));
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Images plus labels, the unit train/eval consume.
#[derive(Debug, Clone, Default)]
pub struct LabeledSet {
    pub images: Vec<Array2<f64>>,
    pub labels: Vec<Label>,
}

impl LabeledSet {
    pub fn new() -> LabeledSet {
        LabeledSet::default()
    }

    pub fn push(&mut self, image: Array2<f64>, label: Label) {
        self.images.push(image);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn label_floats(&self) -> Vec<f64> {
        self.labels
            .iter()
            .map(|l| if l.is_abnormal() { 1.0 } else { 0.0 })
            .collect()
    }

    fn to_batch(&self, idxs: &[usize]) -> Result<(Act, Vec<f64>)> {
        let images: Vec<Array2<f64>> = idxs.iter().map(|&i| self.images[i].clone()).collect();
        let labels: Vec<f64> = idxs
            .iter()
            .map(|&i| if self.labels[i].is_abnormal() { 1.0 } else { 0.0 })
            .collect();
        Ok((pack_images(&images)?, labels))
    }
}

/// Eval-mode loss and accuracy over a whole set.
pub fn evaluate_split(model: &Model, set: &LabeledSet) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let probs = model.predict_batch(&set.images)?;
    let labels = set.label_floats();
    let loss = loss_bce(&probs, &labels);
    let correct = probs
        .iter()
        .zip(&labels)
        .filter(|(&p, &y)| (p >= 0.5) == (y >= 0.5))
        .count();
    Ok((loss, correct as f64 / probs.len() as f64))
}

/// Train with per-epoch seeded shuffling, returning the per-epoch history.
/// The model is left at the parameters of the best-validation-accuracy
/// epoch; equal accuracies are tie-broken by lower validation loss (the
/// later, better-calibrated checkpoint), then by earliest epoch.
/// Minibatches smaller than 2 at the tail of an epoch are skipped (batch
/// norm needs pairs).
pub fn train(
    model: &mut Model,
    train_set: &LabeledSet,
    val_set: &LabeledSet,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_set.len() < 2 {
        return Err(Error::Config("train split needs at least 2 clips".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Config("val split is empty".into()));
    }
    let mut opt = SgdMomentum::new(model.params.len());
    let mut history = TrainHistory::default();
    // (val_acc, val_loss, params, running)
    let mut best: Option<(f64, f64, Vec<f64>, Vec<f64>)> = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        if cfg.shuffle {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed::mix(cfg.seed, &[epoch as u64]));
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for batch_idxs in order.chunks(cfg.batch_size) {
            if batch_idxs.len() < 2 {
                continue;
            }
            let (batch, labels) = train_set.to_batch(batch_idxs)?;
            let (probs, tape) = model.forward_train(&batch)?;
            let loss = loss_bce(&probs, &labels);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    detail: format!("train loss became {loss}"),
                });
            }
            loss_sum += loss * batch_idxs.len() as f64;
            correct += probs
                .iter()
                .zip(&labels)
                .filter(|(&p, &y)| (p >= 0.5) == (y >= 0.5))
                .count();
            seen += batch_idxs.len();
            let grads = match model.backward(&tape, &labels) {
                Ok(g) => g,
                Err(Error::NonFiniteGradient { layer }) => {
                    return Err(Error::Divergence {
                        epoch: epoch + 1,
                        detail: format!("non-finite gradient in {layer}"),
                    })
                }
                Err(e) => return Err(e),
            };
            opt.step(&mut model.params, &grads, cfg.learning_rate, cfg.momentum);
        }
        if seen == 0 {
            return Err(Error::Config(
                "train split too small to form a batch of 2".into(),
            ));
        }
        let (val_loss, val_acc) = evaluate_split(model, val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch: epoch + 1,
                detail: format!("val loss became {val_loss}"),
            });
        }
        history.epochs.push(EpochStats {
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_loss,
            val_acc,
        });
        let better = best.as_ref().is_none_or(|(acc, loss, _, _)| {
            val_acc > *acc || (val_acc == *acc && val_loss < *loss)
        });
        if better {
            best = Some((
                val_acc,
                val_loss,
                model.params.clone(),
                model.running.clone(),
            ));
        }
    }

    if let Some((_, _, params, running)) = best {
        model.params = params;
        model.running = running;
    }
    Ok(history)
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint layout: magic, u32 version, u32 config-JSON length, config
/// JSON, u32 parameter count, little-endian f32 parameters in declaration
/// order, u32 running-stat count, little-endian f32 running stats.
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let cfg = serde_json::to_vec(&model.config).expect("config serializes");
    let mut buf = Vec::with_capacity(16 + cfg.len() + 4 * (model.params.len() + model.running.len()));
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for &p in &model.params {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    buf.extend_from_slice(&(model.running.len() as u32).to_le_bytes());
    for &r in &model.running {
        buf.extend_from_slice(&(r as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12;
    if pos + cfg_len + 4 > bytes.len() {
        return Err(bad("truncated config"));
    }
    let config: ModelConfig = serde_json::from_slice(&bytes[pos..pos + cfg_len])
        .map_err(|e| bad(&format!("config parse: {e}")))?;
    pos += cfg_len;
    let read_vec = |pos: &mut usize| -> Result<Vec<f64>> {
        if *pos + 4 > bytes.len() {
            return Err(bad("truncated"));
        }
        let n = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap()) as usize;
        *pos += 4;
        if *pos + 4 * n > bytes.len() {
            return Err(bad("truncated values"));
        }
        let v = bytes[*pos..*pos + 4 * n]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        *pos += 4 * n;
        Ok(v)
    };
    let params = read_vec(&mut pos)?;
    let running = read_vec(&mut pos)?;
    let layout = Layout::build(&config)?;
    if params.len() != layout.n_params || running.len() != layout.n_running {
        return Err(bad("parameter counts do not match the config"));
    }
    Ok(Model {
        config,
        layout,
        params,
        running,
    })
}
