//! The full U-shaped network: stem, compression stages (blocks + EDSM),
//! bottleneck, expansion stages (EUSM + skip + blocks), and the head.
//! Also the named configurations and parameter/multiply-add accounting.

use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_flops, AttentionKind};
use crate::block::{mlla_block, MllaBlockWeights, StemWeights, MLP_RATIO};
use crate::block::stem as stem_forward;
use crate::error::{Error, Result};
use crate::init;
use crate::params::{Graph, PId, Params};
use crate::rng::stream_rng;
use crate::sampling::{
    edsm, eusm, final_patch_expand, predict_head, EdsmWeights, EusmWeights, HeadWeights,
};
use crate::tape::Var;
use crate::tensor::{Element, Tensor};

/// How decoder stages merge the encoder skip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipFusion {
    /// Elementwise addition (the default).
    Add,
    /// Channel concatenation followed by a learned reduction.
    Concat,
}

/// Architectural description of one model variant.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub name: String,
    pub input_size: usize,
    pub in_channels: usize,
    pub dims: Vec<usize>,
    pub heads: Vec<usize>,
    pub depths: Vec<usize>,
    pub classes: usize,
    pub skip_fusion: SkipFusion,
}

impl ModelConfig {
    pub fn stages(&self) -> usize {
        self.dims.len()
    }

    pub fn base_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn tiny() -> Self {
        ModelConfig {
            name: "tiny".into(),
            input_size: 224,
            in_channels: 3,
            dims: vec![64, 128, 256, 512],
            heads: vec![2, 4, 8, 16],
            depths: vec![2, 4, 8, 4],
            classes: 9,
            skip_fusion: SkipFusion::Add,
        }
    }

    pub fn small() -> Self {
        ModelConfig {
            name: "small".into(),
            depths: vec![3, 6, 21, 6],
            ..Self::tiny()
        }
    }

    pub fn base() -> Self {
        ModelConfig {
            name: "base".into(),
            dims: vec![96, 192, 384, 768],
            heads: vec![3, 6, 12, 24],
            depths: vec![3, 6, 21, 6],
            ..Self::tiny()
        }
    }

    /// Canonical desk-scale instance for training tests.
    pub fn toy() -> Self {
        ModelConfig {
            name: "toy".into(),
            input_size: 64,
            in_channels: 1,
            dims: vec![16, 32, 64, 128],
            heads: vec![1, 2, 4, 8],
            depths: vec![1, 1, 2, 1],
            classes: 3,
            skip_fusion: SkipFusion::Add,
        }
    }

    /// Two-stage model small enough for exhaustive finite differences.
    pub fn micro() -> Self {
        ModelConfig {
            name: "micro".into(),
            input_size: 16,
            in_channels: 1,
            dims: vec![8, 16],
            heads: vec![1, 2],
            depths: vec![1, 1],
            classes: 2,
            skip_fusion: SkipFusion::Add,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "small" => Some(Self::small()),
            "base" => Some(Self::base()),
            "toy" => Some(Self::toy()),
            "micro" => Some(Self::micro()),
            _ => None,
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["tiny", "small", "base", "toy", "micro"]
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.stages();
        if l == 0 || self.heads.len() != l || self.depths.len() != l {
            return Err(Error::config(format!(
                "dims/heads/depths must share a positive length, got {}/{}/{}",
                l,
                self.heads.len(),
                self.depths.len()
            )));
        }
        for i in 0..l {
            if self.dims[i] != self.dims[0] << i {
                return Err(Error::config(format!(
                    "stage {} dim {} violates the doubling schedule from {}",
                    i, self.dims[i], self.dims[0]
                )));
            }
            if self.heads[i] == 0 || self.dims[i] % self.heads[i] != 0 {
                return Err(Error::config(format!(
                    "stage {} heads {} must divide dim {}",
                    i, self.heads[i], self.dims[i]
                )));
            }
            if (self.dims[i] / self.heads[i]) % 2 != 0 {
                return Err(Error::config(format!(
                    "stage {} head dim {} must be even for rotary pairs",
                    i,
                    self.dims[i] / self.heads[i]
                )));
            }
        }
        if self.dims[0] % 2 != 0 {
            return Err(Error::config("base dim must be even for the stem"));
        }
        let divisor = 4 << (l - 1);
        if self.input_size == 0 || self.input_size % divisor != 0 {
            return Err(Error::config(format!(
                "input size {} must be divisible by {}",
                self.input_size, divisor
            )));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("need at least one input channel"));
        }
        Ok(())
    }
}

struct DecoderStage {
    eusm: EusmWeights,
    skip_reduce: Option<(PId, PId)>,
    blocks: Vec<MllaBlockWeights>,
}

/// A built model: weight registry plus the layer wiring.
pub struct Model<E: Element> {
    pub config: ModelConfig,
    pub params: Params<E>,
    stem: StemWeights,
    encoder: Vec<Vec<MllaBlockWeights>>,
    downs: Vec<EdsmWeights>,
    decoder: Vec<DecoderStage>, // ordered from deepest to shallowest
    head: HeadWeights,
}

/// Per-stage shapes recorded during a traced forward pass.
pub struct ForwardTrace<E: Element> {
    /// (label, sequence length, channels) for res1..res(2L-1).
    pub stage_shapes: Vec<(String, usize, usize)>,
    /// Encoder skip tensors, one per non-bottleneck stage.
    pub skips: Vec<Tensor<E>>,
    /// Decoder block inputs after skip fusion, deepest first.
    pub decoder_inputs: Vec<Tensor<E>>,
}

/// Deterministic construction from a config and seed.
pub fn build_model<E: Element>(config: &ModelConfig, seed: u64) -> Result<Model<E>> {
    config.validate()?;
    let mut rng: ChaCha8Rng = stream_rng(seed, 0);
    let mut params = Params::new();
    let l = config.stages();

    let stem = StemWeights::init(
        &mut params,
        "stem",
        config.in_channels,
        config.base_dim(),
        &mut rng,
    )?;

    let mut encoder = Vec::with_capacity(l);
    let mut downs = Vec::with_capacity(l - 1);
    for i in 0..l {
        let mut blocks = Vec::with_capacity(config.depths[i]);
        for j in 0..config.depths[i] {
            blocks.push(MllaBlockWeights::init(
                &mut params,
                &format!("enc{i}.blk{j}"),
                config.dims[i],
                config.heads[i],
                &mut rng,
            )?);
        }
        encoder.push(blocks);
        if i + 1 < l {
            downs.push(EdsmWeights::init(
                &mut params,
                &format!("edsm{i}"),
                config.dims[i],
                &mut rng,
            )?);
        }
    }

    // decoder mirrors the encoder depths, deepest stage first
    let mut decoder = Vec::with_capacity(l - 1);
    for i in (0..l - 1).rev() {
        let eusm_w = EusmWeights::init(&mut params, &format!("eusm{i}"), config.dims[i + 1], &mut rng)?;
        let skip_reduce = match config.skip_fusion {
            SkipFusion::Add => None,
            SkipFusion::Concat => Some(init::dense(
                &mut params,
                &format!("dec{i}.skip_reduce"),
                2 * config.dims[i],
                config.dims[i],
                &mut rng,
            )?),
        };
        let mut blocks = Vec::with_capacity(config.depths[i]);
        for j in 0..config.depths[i] {
            blocks.push(MllaBlockWeights::init(
                &mut params,
                &format!("dec{i}.blk{j}"),
                config.dims[i],
                config.heads[i],
                &mut rng,
            )?);
        }
        decoder.push(DecoderStage {
            eusm: eusm_w,
            skip_reduce,
            blocks,
        });
    }

    let head = HeadWeights::init(&mut params, "head", config.base_dim(), config.classes, &mut rng)?;

    Ok(Model {
        config: config.clone(),
        params,
        stem,
        encoder,
        downs,
        decoder,
        head,
    })
}

impl<E: Element> Model<E> {
    /// Forward pass producing per-pixel class logits [B, classes, H, W].
    pub fn forward(&self, g: &mut Graph<E>, image: Var) -> Result<Var> {
        Ok(self.forward_inner(g, image, None)?.0)
    }

    /// Forward pass that also records per-stage shapes and skip tensors.
    pub fn forward_traced(&self, g: &mut Graph<E>, image: Var) -> Result<(Var, ForwardTrace<E>)> {
        let mut trace = ForwardTrace {
            stage_shapes: Vec::new(),
            skips: Vec::new(),
            decoder_inputs: Vec::new(),
        };
        let (logits, _) = {
            let (v, t) = self.forward_inner(g, image, Some(&mut trace))?;
            (v, t)
        };
        Ok((logits, trace))
    }

    fn forward_inner(
        &self,
        g: &mut Graph<E>,
        image: Var,
        mut trace: Option<&mut ForwardTrace<E>>,
    ) -> Result<(Var, ())> {
        let l = self.config.stages();
        let (mut x, mut h, mut w) = stem_forward(g, image, &self.stem)?;

        let mut skips: Vec<(Var, usize, usize)> = Vec::with_capacity(l - 1);
        for i in 0..l {
            for blk in &self.encoder[i] {
                x = mlla_block(g, x, blk, h, w)?;
            }
            if let Some(t) = trace.as_deref_mut() {
                let s = g.tape.shape(x);
                t.stage_shapes.push((format!("res{}", i + 1), s[1], s[2]));
                if i + 1 < l {
                    t.skips.push(g.tape.value(x).clone());
                }
            }
            if i + 1 < l {
                skips.push((x, h, w));
                let (nx, nh, nw) = edsm(g, x, &self.downs[i], h, w)?;
                x = nx;
                h = nh;
                w = nw;
            }
        }

        // expansion: EUSM, fuse skip, then the mirrored blocks
        let mut y = x;
        for (d, stage) in self.decoder.iter().enumerate() {
            let skip_idx = l - 2 - d;
            let (uy, nh, nw) = eusm(g, y, &stage.eusm, h, w)?;
            h = nh;
            w = nw;
            let (skip_var, sh, sw) = skips[skip_idx];
            debug_assert_eq!((sh, sw), (h, w));
            y = match stage.skip_reduce {
                None => g.tape.add(uy, skip_var)?,
                Some((rw, rb)) => {
                    let cat = g.tape.concat_last(uy, skip_var)?;
                    let wv = g.p(rw)?;
                    let bv = g.p(rb)?;
                    g.tape.linear(cat, wv, Some(bv))?
                }
            };
            if let Some(t) = trace.as_deref_mut() {
                t.decoder_inputs.push(g.tape.value(y).clone());
            }
            for blk in &stage.blocks {
                y = mlla_block(g, y, blk, h, w)?;
            }
            if let Some(t) = trace.as_deref_mut() {
                let s = g.tape.shape(y);
                t.stage_shapes.push((format!("res{}", l + 1 + d), s[1], s[2]));
            }
        }

        let (expanded, fh, fw) = final_patch_expand(g, y, self.head.expand, h, w)?;
        let logits = predict_head(g, expanded, self.head.classifier, fh, fw)?;
        Ok((logits, ()))
    }

    /// Total trainable elements in the registry.
    pub fn count_params(&self) -> usize {
        self.params.total_elements()
    }

    /// Parameter totals grouped by top-level module.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let groups = ["stem", "enc", "edsm", "eusm", "dec", "head"];
        let mut totals = vec![0usize; groups.len()];
        for (name, t) in self.params.iter() {
            for (gi, g) in groups.iter().enumerate() {
                if name.starts_with(g) {
                    totals[gi] += t.numel();
                    break;
                }
            }
        }
        groups
            .iter()
            .map(|s| s.to_string())
            .zip(totals)
            .collect()
    }

    /// Multiply-add count of one forward pass at the given input size.
    /// Elementwise and normalization work is included at one op per
    /// element (LayerNorm/softmax at four).
    pub fn count_macs(&self, input_h: usize, input_w: usize) -> u64 {
        let c0 = self.config.base_dim() as u64;
        let in_ch = self.config.in_channels as u64;
        let (h2, w2) = ((input_h / 2) as u64, (input_w / 2) as u64);
        let (h4, w4) = ((input_h / 4) as u64, (input_w / 4) as u64);

        // stem: two stride-2 convs around a stride-1 conv, with GELUs
        let mut total = h2 * w2 * (c0 / 2) * in_ch * 9
            + h2 * w2 * (c0 / 2) * (c0 / 2) * 9
            + h4 * w4 * c0 * (c0 / 2) * 9
            + 2 * h2 * w2 * (c0 / 2) // gelu x2
            + h2 * w2 * (c0 / 2); // residual add

        let l = self.config.stages();
        let mut seq = (h4 * w4) as u64;
        let mut enc_seqs = Vec::with_capacity(l);
        for i in 0..l {
            let c = self.config.dims[i] as u64;
            let heads = self.config.heads[i] as u64;
            total += self.config.depths[i] as u64 * block_macs(seq, c, heads);
            enc_seqs.push(seq);
            if i + 1 < l {
                total += edsm_macs(seq, c);
                seq /= 4;
            }
        }
        for (d, _) in self.decoder.iter().enumerate() {
            let i = l - 2 - d;
            let c_in = self.config.dims[i + 1] as u64;
            total += eusm_macs(seq, c_in);
            seq *= 4;
            let c = self.config.dims[i] as u64;
            let heads = self.config.heads[i] as u64;
            total += seq * c; // skip fusion add
            total += self.config.depths[i] as u64 * block_macs(seq, c, heads);
            debug_assert_eq!(seq, enc_seqs[i]);
        }

        // head: expansion to 16C, regroup (free), 1x1 classifier
        total += seq * c0 * 16 * c0;
        total += (input_h * input_w) as u64 * self.config.classes as u64 * c0;
        total
    }

    /// FLOPs under the documented convention (one multiply-add = 2 FLOPs).
    pub fn count_flops(&self, input_h: usize, input_w: usize) -> u64 {
        2 * self.count_macs(input_h, input_w)
    }
}

fn block_macs(seq: u64, c: u64, heads: u64) -> u64 {
    let d = c / heads;
    let dense = 7 * seq * c * c + (2 * MLP_RATIO as u64) * seq * c * c;
    let dwconvs = 4 * seq * c * 9; // gate branch, lepe, cpe1, cpe2
    let attention = heads * attention_flops(AttentionKind::Linear, seq, d, d);
    let rope = 2 * seq * c * 3;
    let norms = 2 * 4 * seq * c;
    let elementwise = 10 * seq * c + seq * (MLP_RATIO as u64) * c; // acts, adds, phi
    dense + dwconvs + attention + rope + norms + elementwise
}

fn edsm_macs(seq: u64, c: u64) -> u64 {
    // 1x1 expand, depthwise stride-2, 1x1 mix
    seq * c * 2 * c + (seq / 4) * 2 * c * 9 + (seq / 4) * 2 * c * 2 * c
}

fn eusm_macs(seq: u64, c: u64) -> u64 {
    // 1x1, transposed depthwise 3x3, 1x1 halving, LayerNorm
    seq * c * c + seq * c * 9 + 4 * seq * c * (c / 2) + 4 * (4 * seq) * (c / 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ModelConfig::preset_names() {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn config_rejects_bad_schedules() {
        let mut c = ModelConfig::toy();
        c.dims = vec![16, 48, 64, 128];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.heads = vec![1, 3, 4, 8];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.input_size = 48;
        assert!(c.validate().is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let m1 = build_model::<f32>(&ModelConfig::micro(), 0).unwrap();
        let m2 = build_model::<f32>(&ModelConfig::micro(), 0).unwrap();
        assert_eq!(m1.params.len(), m2.params.len());
        for ((n1, t1), (n2, t2)) in m1.params.iter().zip(m2.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data(), "mismatch in {n1}");
        }
        let m3 = build_model::<f32>(&ModelConfig::micro(), 1).unwrap();
        assert_ne!(
            m1.params.iter().next().unwrap().1.data(),
            m3.params.iter().next().unwrap().1.data()
        );
    }

    #[test]
    fn toy_forward_shapes() {
        let model = build_model::<f32>(&ModelConfig::toy(), 0).unwrap();
        let mut g = Graph::new(&model.params);
        let img = g
            .tape
            .constant(Tensor::from_fn(&[1, 1, 64, 64], |i| (i as f32 * 0.001).sin()))
            .unwrap();
        let (logits, trace) = model.forward_traced(&mut g, img).unwrap();
        assert_eq!(g.tape.shape(logits), &[1, 3, 64, 64]);
        let shapes: Vec<(usize, usize)> = trace
            .stage_shapes
            .iter()
            .map(|(_, l, c)| (*l, *c))
            .collect();
        assert_eq!(
            shapes,
            vec![
                (256, 16),
                (64, 32),
                (16, 64),
                (4, 128),
                (16, 64),
                (64, 32),
                (256, 16)
            ]
        );
    }

    #[test]
    fn concat_fusion_builds_and_forwards() {
        let mut cfg = ModelConfig::micro();
        cfg.skip_fusion = SkipFusion::Concat;
        let model = build_model::<f32>(&cfg, 0).unwrap();
        let mut g = Graph::new(&model.params);
        let img = g.tape.constant(Tensor::zeros(&[1, 1, 16, 16])).unwrap();
        let logits = model.forward(&mut g, img).unwrap();
        assert_eq!(g.tape.shape(logits), &[1, 2, 16, 16]);
    }

    #[test]
    fn toy_param_count_is_small() {
        let model = build_model::<f32>(&ModelConfig::toy(), 0).unwrap();
        let total = model.count_params();
        assert!(total < 2_000_000, "toy has {total} params");
    }

    #[test]
    fn quarter_input_scales_flops_by_quarter() {
        let model = build_model::<f32>(&ModelConfig::toy(), 0).unwrap();
        let full = model.count_macs(64, 64) as f64;
        let half = model.count_macs(32, 32) as f64;
        let ratio = half / full;
        assert!((0.2..=0.3).contains(&ratio), "ratio {ratio}");
    }
}
