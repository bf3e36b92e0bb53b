//! Encoder and decoder wiring, forward passes and backpropagation.
//!
//! Levels: level 0 is the ConvLSTM output at the input resolution, level
//! `k + 1` is the output of downsampling block `k`. The decoder upsamples
//! from the deepest level and concatenates the encoder feature map of every
//! shallower level (cross-connections) before the next stage.

use rand_chacha::ChaCha8Rng;

use super::conv::{Conv, ConvCache, ConvGeom};
use super::dense::Dense;
use super::lstm::{ConvLstm, LstmCache};
use super::norm::{BatchNorm, BnCache};
use super::params::ParamStore;
use super::tensor::Tensor;
use super::ModelConfig;
use crate::patching::INPUT_CHANNELS;

const KERNEL: [usize; 3] = [3, 3, 3];
const DOWN: [usize; 3] = [2, 2, 2];
const UNIT: [usize; 3] = [1, 1, 1];

fn relu_inplace(data: &mut [f64]) {
    for v in data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` where the rectified activation was not positive.
fn relu_backward(grad: &mut [f64], activation: &[f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn conv_layer(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    geom: ConvGeom,
    cin: usize,
    cout: usize,
    transpose: bool,
) -> Conv {
    let k = geom.kernel_len();
    let shape = if transpose {
        vec![cin, cout, geom.kernel[0], geom.kernel[1], geom.kernel[2]]
    } else {
        vec![cout, cin, geom.kernel[0], geom.kernel[1], geom.kernel[2]]
    };
    let weight = store.glorot(format!("{name}/kernel"), shape, k * cin, k * cout, rng);
    let bias = store.constant(format!("{name}/bias"), cout, 0.0, true);
    Conv {
        geom,
        cin,
        cout,
        weight,
        bias,
        transpose,
    }
}

fn batch_norm(store: &mut ParamStore, name: &str, channels: usize) -> BatchNorm {
    BatchNorm {
        channels,
        gamma: store.constant(format!("{name}/gamma"), channels, 1.0, true),
        beta: store.constant(format!("{name}/beta"), channels, 0.0, true),
        running_mean: store.constant(format!("{name}/moving_mean"), channels, 0.0, false),
        running_var: store.constant(format!("{name}/moving_variance"), channels, 1.0, false),
    }
}

fn dense_layer(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, inputs: usize, outputs: usize) -> Dense {
    Dense {
        inputs,
        outputs,
        weight: store.glorot(format!("{name}/kernel"), vec![inputs, outputs], inputs, outputs, rng),
        bias: store.constant(format!("{name}/bias"), outputs, 0.0, true),
    }
}

/// conv-BN-relu, conv-BN, plus a conv-BN (downsampling) or identity shortcut,
/// then relu of the sum.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub shortcut: Option<(Conv, BatchNorm)>,
}

#[derive(Debug, Clone)]
pub struct ResCache {
    c1: ConvCache,
    b1: BnCache,
    a1: Tensor,
    c2: ConvCache,
    b2: BnCache,
    sc: Option<(ConvCache, BnCache)>,
    out: Tensor,
}

impl ResBlock {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: [usize; 3],
        cin: usize,
        cout: usize,
        downsample: bool,
    ) -> Self {
        let stride = if downsample { DOWN } else { UNIT };
        let g1 = ConvGeom::same(dims, KERNEL, stride);
        let g2 = ConvGeom::same(g1.output, KERNEL, UNIT);
        let conv1 = conv_layer(store, rng, &format!("{name}/conv1"), g1, cin, cout, false);
        let bn1 = batch_norm(store, &format!("{name}/bn1"), cout);
        let conv2 = conv_layer(store, rng, &format!("{name}/conv2"), g2, cout, cout, false);
        let bn2 = batch_norm(store, &format!("{name}/bn2"), cout);
        let shortcut = (downsample || cin != cout).then(|| {
            let conv = conv_layer(store, rng, &format!("{name}/shortcut"), g1, cin, cout, false);
            let bn = batch_norm(store, &format!("{name}/shortcut_bn"), cout);
            (conv, bn)
        });
        ResBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        }
    }

    fn out_dims(&self) -> [usize; 3] {
        self.conv2.geom.output
    }

    fn macs(&self) -> usize {
        self.conv1.macs() + self.conv2.macs() + self.shortcut.as_ref().map_or(0, |(c, _)| c.macs())
    }

    fn batch_norms(&self) -> Vec<&BatchNorm> {
        let mut v = vec![&self.bn1, &self.bn2];
        if let Some((_, bn)) = &self.shortcut {
            v.push(bn);
        }
        v
    }

    fn forward_train(&self, values: &[f64], x: &Tensor) -> (Tensor, ResCache) {
        let (y, c1) = self.conv1.forward(values, x, true);
        let (mut a1, b1) = self.bn1.forward_train(values, &y);
        relu_inplace(&mut a1.data);
        let (y, c2) = self.conv2.forward(values, &a1, true);
        let (mut out, b2) = self.bn2.forward_train(values, &y);
        let sc = match &self.shortcut {
            Some((conv, bn)) => {
                let (s, cc) = conv.forward(values, x, true);
                let (s, bc) = bn.forward_train(values, &s);
                out.add_assign(&s);
                Some((cc, bc))
            }
            None => {
                out.add_assign(x);
                None
            }
        };
        relu_inplace(&mut out.data);
        let cache = ResCache {
            c1,
            b1,
            a1,
            c2,
            b2,
            sc,
            out: out.clone(),
        };
        (out, cache)
    }

    fn backward(&self, values: &[f64], cache: &ResCache, dout: &Tensor, grads: &mut [f64]) -> Tensor {
        let mut d = dout.clone();
        relu_backward(&mut d.data, &cache.out.data);
        let dy2 = self.bn2.backward(values, &cache.b2, &d, grads);
        let mut da1 = self
            .conv2
            .backward(values, &cache.c2, &dy2, grads, true)
            .expect("input gradient");
        relu_backward(&mut da1.data, &cache.a1.data);
        let dy1 = self.bn1.backward(values, &cache.b1, &da1, grads);
        let mut dx = self
            .conv1
            .backward(values, &cache.c1, &dy1, grads, true)
            .expect("input gradient");
        match (&self.shortcut, &cache.sc) {
            (Some((conv, bn)), Some((cc, bc))) => {
                let ds = bn.backward(values, bc, &d, grads);
                let dxs = conv.backward(values, cc, &ds, grads, true).expect("input gradient");
                dx.add_assign(&dxs);
            }
            _ => dx.add_assign(&d),
        }
        dx
    }

    fn infer_sample(&self, values: &[f64], state: &[f64], x: &[f64]) -> Vec<f64> {
        let mut a1 = vec![0.0; self.conv1.cout * self.conv1.geom.out_len()];
        self.conv1.forward_sample(values, x, &mut a1, false);
        self.bn1.forward_infer_sample(values, state, &mut a1);
        relu_inplace(&mut a1);
        let mut out = vec![0.0; self.conv2.cout * self.conv2.geom.out_len()];
        self.conv2.forward_sample(values, &a1, &mut out, false);
        self.bn2.forward_infer_sample(values, state, &mut out);
        match &self.shortcut {
            Some((conv, bn)) => {
                let mut s = vec![0.0; out.len()];
                conv.forward_sample(values, x, &mut s, false);
                bn.forward_infer_sample(values, state, &mut s);
                for (o, v) in out.iter_mut().zip(&s) {
                    *o += v;
                }
            }
            None => {
                for (o, v) in out.iter_mut().zip(x) {
                    *o += v;
                }
            }
        }
        relu_inplace(&mut out);
        out
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub lstm: ConvLstm,
    pub down: Vec<ResBlock>,
    pub extra: Vec<ResBlock>,
    pub bottleneck: Dense,
    pub mean_head: Dense,
    pub log_var_head: Dense,
    pub expand: Dense,
    /// `up[k]` maps level `k + 1` to level `k`.
    pub up: Vec<(Conv, BatchNorm)>,
    pub output: Conv,
    pub level_dims: Vec<[usize; 3]>,
    pub level_channels: Vec<usize>,
    pub decoder_channels: usize,
    pub timesteps: usize,
}

/// Per-stream encoder activations kept for backward.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    lstm: LstmCache,
    down: Vec<ResCache>,
    extra: Vec<ResCache>,
    top_shape: [usize; 5],
    pooled: Vec<f64>,
    bottleneck: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[N, latent]` row-major.
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
    /// Feature maps of levels `0..L` for the decoder.
    pub skips: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    z: Vec<f64>,
    expanded: Vec<f64>,
    up: Vec<(ConvCache, BnCache, Tensor)>,
    output: ConvCache,
}

impl Network {
    pub fn build(config: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let (t, p) = (config.timesteps, config.patch_size);
        let f = config.convlstm_filters;
        let rows = (INPUT_CHANNELS + f) * 9;
        let lstm_w = store.glorot(
            "convlstm/kernel".into(),
            vec![4 * f, INPUT_CHANNELS + f, 3, 3],
            9 * (INPUT_CHANNELS + f),
            9 * 4 * f,
            rng,
        );
        debug_assert_eq!(lstm_w.len, 4 * f * rows);
        let mut bias = vec![0.0; 4 * f];
        bias[f..2 * f].fill(1.0);
        let lstm_b = store.with_init("convlstm/bias".into(), bias);
        let lstm = ConvLstm::new(INPUT_CHANNELS, f, [p, p], lstm_w, lstm_b);

        let mut level_dims = vec![[t, p, p]];
        let mut level_channels = vec![f];
        let mut down = Vec::new();
        for (k, &ch) in config.residual_channels.iter().enumerate() {
            let block = ResBlock::new(
                store,
                rng,
                &format!("res{}", k + 1),
                level_dims[k],
                level_channels[k],
                ch,
                true,
            );
            level_dims.push(block.out_dims());
            level_channels.push(ch);
            down.push(block);
        }
        let top_dims = *level_dims.last().expect("levels");
        let top_ch = *level_channels.last().expect("levels");
        let extra = (0..config.extra_residual_blocks)
            .map(|k| {
                ResBlock::new(
                    store,
                    rng,
                    &format!("res{}", config.residual_channels.len() + k + 1),
                    top_dims,
                    top_ch,
                    top_ch,
                    false,
                )
            })
            .collect();
        let bottleneck = dense_layer(store, rng, "bottleneck", top_ch, config.bottleneck_units);
        let mean_head = dense_layer(store, rng, "z_mean", config.bottleneck_units, config.latent_dim);
        let log_var_head = dense_layer(store, rng, "z_log_var", config.bottleneck_units, config.latent_dim);

        let cd = config.decoder_channels;
        let top_len: usize = top_dims.iter().product();
        let expand = dense_layer(store, rng, "decoder/expand", config.latent_dim, cd * top_len);
        let levels = config.residual_channels.len();
        let mut up: Vec<(Conv, BatchNorm)> = Vec::with_capacity(levels);
        for k in (0..levels).rev() {
            let cin = if k + 1 == levels { cd } else { 2 * level_channels[k + 1] };
            let geom = ConvGeom::same(level_dims[k], KERNEL, DOWN);
            let conv = conv_layer(store, rng, &format!("decoder/up{k}"), geom, cin, level_channels[k], true);
            let bn = batch_norm(store, &format!("decoder/up{k}_bn"), level_channels[k]);
            up.push((conv, bn));
        }
        up.reverse();
        let output = conv_layer(
            store,
            rng,
            "decoder/output",
            ConvGeom::same(level_dims[0], KERNEL, UNIT),
            2 * f,
            INPUT_CHANNELS,
            true,
        );
        Network {
            lstm,
            down,
            extra,
            bottleneck,
            mean_head,
            log_var_head,
            expand,
            up,
            output,
            level_dims,
            level_channels,
            decoder_channels: cd,
            timesteps: t,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.mean_head.outputs
    }

    fn levels(&self) -> usize {
        self.down.len()
    }

    fn top_dims(&self) -> [usize; 3] {
        self.level_dims[self.levels()]
    }

    /// Multiply-accumulates to encode one patch.
    pub fn encoder_macs(&self) -> usize {
        self.lstm.macs_per_step() * self.timesteps
            + self.down.iter().chain(&self.extra).map(ResBlock::macs).sum::<usize>()
            + self.bottleneck.inputs * self.bottleneck.outputs
            + 2 * self.mean_head.inputs * self.mean_head.outputs
    }

    /// Multiply-accumulates to decode one patch.
    pub fn decoder_macs(&self) -> usize {
        self.expand.inputs * self.expand.outputs
            + self.up.iter().map(|(c, _)| c.macs()).sum::<usize>()
            + self.output.macs()
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        let mut v: Vec<&BatchNorm> = self
            .down
            .iter()
            .chain(&self.extra)
            .flat_map(ResBlock::batch_norms)
            .collect();
        v.extend(self.up.iter().map(|(_, bn)| bn));
        v
    }

    fn pool(top: &Tensor) -> Vec<f64> {
        let plane = top.plane();
        top.data
            .chunks_exact(plane)
            .map(|c| c.iter().sum::<f64>() / plane as f64)
            .collect()
    }

    pub fn encode_train(&self, values: &[f64], x: &Tensor) -> (EncoderOutput, EncoderCache) {
        let (s0, lstm) = self.lstm.forward(values, x, true);
        let mut skips = vec![s0];
        let mut down = Vec::with_capacity(self.levels());
        for block in &self.down {
            let (s, c) = block.forward_train(values, skips.last().expect("level"));
            skips.push(s);
            down.push(c);
        }
        let mut top = skips.pop().expect("top level");
        let mut extra = Vec::with_capacity(self.extra.len());
        for block in &self.extra {
            let (s, c) = block.forward_train(values, &top);
            top = s;
            extra.push(c);
        }
        let pooled = Self::pool(&top);
        let bottleneck = self.bottleneck.forward(values, &pooled);
        let mean = self.mean_head.forward(values, &bottleneck);
        let log_var = self.log_var_head.forward(values, &bottleneck);
        let cache = EncoderCache {
            lstm,
            down,
            extra,
            top_shape: top.shape,
            pooled,
            bottleneck,
        };
        (EncoderOutput { mean, log_var, skips }, cache)
    }

    pub fn decode_train(&self, values: &[f64], z: &[f64], skips: &[Tensor]) -> (Tensor, DecoderCache) {
        let n = z.len() / self.latent_dim();
        let mut expanded = self.expand.forward(values, z);
        relu_inplace(&mut expanded);
        let [d, h, w] = self.top_dims();
        let mut cur = Tensor {
            data: expanded.clone(),
            shape: [n, self.decoder_channels, d, h, w],
        };
        let mut up = Vec::with_capacity(self.levels());
        for k in (0..self.levels()).rev() {
            let (conv, bn) = &self.up[k];
            let (u, cc) = conv.forward(values, &cur, true);
            let (mut u, bc) = bn.forward_train(values, &u);
            relu_inplace(&mut u.data);
            cur = Tensor::concat_channels(&u, &skips[k]);
            up.push((cc, bc, u));
        }
        up.reverse();
        let (recon, output) = self.output.forward(values, &cur, true);
        let cache = DecoderCache {
            z: z.to_vec(),
            expanded,
            up,
            output,
        };
        (recon, cache)
    }

    /// Returns `dz` and the gradients reaching each skip connection.
    pub fn decode_backward(
        &self,
        values: &[f64],
        cache: &DecoderCache,
        d_recon: &Tensor,
        grads: &mut [f64],
    ) -> (Vec<f64>, Vec<Tensor>) {
        let mut d = self
            .output
            .backward(values, &cache.output, d_recon, grads, true)
            .expect("input gradient");
        let mut dskips = Vec::with_capacity(self.levels());
        for k in 0..self.levels() {
            let (conv, bn) = &self.up[k];
            let (cc, bc, u) = &cache.up[k];
            let (mut du, dskip) = d.split_channels(conv.cout);
            dskips.push(dskip);
            relu_backward(&mut du.data, &u.data);
            let dpre = bn.backward(values, bc, &du, grads);
            d = conv.backward(values, cc, &dpre, grads, true).expect("input gradient");
        }
        let mut dexp = d.data;
        relu_backward(&mut dexp, &cache.expanded);
        let dz = self.expand.backward(values, &cache.z, &dexp, grads);
        (dz, dskips)
    }

    pub fn encode_backward(
        &self,
        values: &[f64],
        cache: &EncoderCache,
        d_mean: &[f64],
        d_log_var: &[f64],
        dskips: &[Tensor],
        grads: &mut [f64],
    ) {
        let mut db = self.mean_head.backward(values, &cache.bottleneck, d_mean, grads);
        let db2 = self.log_var_head.backward(values, &cache.bottleneck, d_log_var, grads);
        for (a, b) in db.iter_mut().zip(&db2) {
            *a += b;
        }
        let dpool = self.bottleneck.backward(values, &cache.pooled, &db, grads);
        let mut d = Tensor::zeros(cache.top_shape);
        let plane = d.plane();
        for (chunk, &g) in d.data.chunks_exact_mut(plane).zip(&dpool) {
            chunk.fill(g / plane as f64);
        }
        for (block, c) in self.extra.iter().zip(&cache.extra).rev() {
            d = block.backward(values, c, &d, grads);
        }
        for k in (0..self.levels()).rev() {
            d = self.down[k].backward(values, &cache.down[k], &d, grads);
            d.add_assign(&dskips[k]);
        }
        self.lstm.backward(values, &cache.lstm, &d, grads);
    }

    pub fn update_running(&self, state: &mut [f64], enc: &EncoderCache, dec: &DecoderCache) {
        for (block, c) in self.down.iter().zip(&enc.down).chain(self.extra.iter().zip(&enc.extra)) {
            block.bn1.update_running(state, &c.b1);
            block.bn2.update_running(state, &c.b2);
            if let (Some((_, bn)), Some((_, bc))) = (&block.shortcut, &c.sc) {
                bn.update_running(state, bc);
            }
        }
        for ((_, bn), (_, bc, _)) in self.up.iter().zip(&dec.up) {
            bn.update_running(state, bc);
        }
    }

    /// Inference-mode encoding of one `[3, T, p, p]` sample. Skips are only
    /// collected when requested.
    pub fn encode_sample(
        &self,
        values: &[f64],
        state: &[f64],
        x: &[f64],
        keep_skips: bool,
    ) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
        let f = self.lstm.filters;
        let s0_len = f * self.level_dims[0].iter().product::<usize>();
        let mut cur = vec![0.0; s0_len];
        self.lstm.infer_sample(values, x, self.timesteps, &mut cur);
        let mut skips = Vec::new();
        for block in &self.down {
            let next = block.infer_sample(values, state, &cur);
            if keep_skips {
                skips.push(cur);
            }
            cur = next;
        }
        for block in &self.extra {
            cur = block.infer_sample(values, state, &cur);
        }
        let top_len: usize = self.top_dims().iter().product();
        let pooled: Vec<f64> = cur
            .chunks_exact(top_len)
            .map(|c| c.iter().sum::<f64>() / top_len as f64)
            .collect();
        let mut b = vec![0.0; self.bottleneck.outputs];
        self.bottleneck.forward_sample(values, &pooled, &mut b);
        let mut mean = vec![0.0; self.latent_dim()];
        let mut log_var = vec![0.0; self.latent_dim()];
        self.mean_head.forward_sample(values, &b, &mut mean);
        self.log_var_head.forward_sample(values, &b, &mut log_var);
        (mean, log_var, skips)
    }

    /// Inference-mode decoding of one latent vector with its skips.
    pub fn decode_sample(&self, values: &[f64], state: &[f64], z: &[f64], skips: &[Vec<f64>]) -> Vec<f64> {
        let mut cur = vec![0.0; self.expand.outputs];
        self.expand.forward_sample(values, z, &mut cur);
        relu_inplace(&mut cur);
        for k in (0..self.levels()).rev() {
            let (conv, bn) = &self.up[k];
            let mut u = vec![0.0; conv.cout * conv.geom.in_len()];
            conv.forward_sample(values, &cur, &mut u, false);
            bn.forward_infer_sample(values, state, &mut u);
            relu_inplace(&mut u);
            u.extend_from_slice(&skips[k]);
            cur = u;
        }
        let mut out = vec![0.0; self.output.cout * self.output.geom.in_len()];
        self.output.forward_sample(values, &cur, &mut out, false);
        out
    }
}
