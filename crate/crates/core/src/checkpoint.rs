//! Binary checkpoints and fitted-pipeline directories.
//!
//! A checkpoint file is `GXF1`, a little-endian `u32` format version, a
//! `u32` kind tag, then the kind's dimension header followed by flat `f64`
//! weight arrays. A pipeline directory holds one checkpoint per component
//! plus `manifest.txt` with `key=value` lines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::diffusion::{NoiseSchedule, ScoreModel, Standardizer, TauEmbed};
use crate::error::{Error, Result};
use crate::flows::{BaseDensity, CouplingFlow, CouplingKind, CouplingLayer, FlowLayer};
use crate::nn::{Activation, Mlp, OutputActivation};
use crate::transfer::{DecoderMap, EmbeddingMap, Family, Fitted, FittedPipeline, GenModel, Mode};

pub const MAGIC: &[u8; 4] = b"GXF1";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Diffusion = 1,
    Flow = 2,
    Embedding = 3,
    Decoder = 4,
}

impl CheckpointKind {
    fn from_tag(t: u32) -> Result<Self> {
        Ok(match t {
            1 => Self::Diffusion,
            2 => Self::Flow,
            3 => Self::Embedding,
            4 => Self::Decoder,
            other => return Err(Error::Format(format!("unknown kind tag {other}"))),
        })
    }
}

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn idx(&mut self, v: &[usize]) {
        self.usize(v.len());
        v.iter().for_each(|&i| self.usize(i));
    }

    fn mlp(&mut self, net: &Mlp) {
        self.idx(net.layer_dims());
        self.u32(match net.hidden_activation() {
            Activation::Relu => 0,
            Activation::Requ => 1,
            Activation::Tanh => 2,
        });
        match net.output_activation() {
            OutputActivation::Identity => {
                self.u32(0);
                self.f64(0.0);
            }
            OutputActivation::ScaledTanh(b) => {
                self.u32(1);
                self.f64(b);
            }
        }
        self.usize(net.num_params());
        net.params().iter().for_each(|&p| self.f64(p));
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} too large")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// Length prefix, checked against the bytes left so corrupt headers
    /// cannot request huge allocations.
    fn len(&mut self, item_bytes: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(item_bytes) > self.buf.len() - self.pos {
            return Err(Error::Format(format!("length {n} exceeds remaining data")));
        }
        Ok(n)
    }

    fn idx(&mut self) -> Result<Vec<usize>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.usize()).collect()
    }

    fn mlp(&mut self) -> Result<Mlp> {
        let dims = self.idx()?;
        let hidden = match self.u32()? {
            0 => Activation::Relu,
            1 => Activation::Requ,
            2 => Activation::Tanh,
            t => return Err(Error::Format(format!("unknown activation tag {t}"))),
        };
        let (tag, b) = (self.u32()?, self.f64()?);
        let output = match tag {
            0 => OutputActivation::Identity,
            1 => OutputActivation::ScaledTanh(b),
            t => return Err(Error::Format(format!("unknown output tag {t}"))),
        };
        let n = self.len(8)?;
        let params = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Mlp::from_params(dims, hidden, output, params).map_err(|e| Error::Format(e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn header(kind: CheckpointKind) -> Enc {
    let mut e = Enc::default();
    e.0.extend_from_slice(MAGIC);
    e.u32(VERSION);
    e.u32(kind as u32);
    e
}

fn open(buf: &[u8]) -> Result<(CheckpointKind, Dec<'_>)> {
    if buf.len() < 12 || &buf[..4] != MAGIC {
        return Err(Error::Format("missing GXF1 magic".into()));
    }
    let mut d = Dec { buf, pos: 4 };
    let version = d.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    Ok((CheckpointKind::from_tag(d.u32()?)?, d))
}

/// Any component that can be stored in a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Model(GenModel),
    Embedding(EmbeddingMap),
    Decoder(DecoderMap),
}

impl Checkpoint {
    pub fn kind(&self) -> CheckpointKind {
        match self {
            Checkpoint::Model(GenModel::Diffusion { .. }) => CheckpointKind::Diffusion,
            Checkpoint::Model(GenModel::Flow(_)) => CheckpointKind::Flow,
            Checkpoint::Embedding(_) => CheckpointKind::Embedding,
            Checkpoint::Decoder(_) => CheckpointKind::Decoder,
        }
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut e = header(ck.kind());
    match ck {
        Checkpoint::Model(GenModel::Diffusion {
            score,
            schedule,
            mc_taus,
            affine,
        }) => {
            e.usize(score.d_x);
            e.usize(score.d_c);
            let (tag, k) = match score.tau_embed {
                TauEmbed::Raw => (0, 0),
                TauEmbed::Log => (1, 0),
                TauEmbed::Sinusoidal(k) => (2, k),
            };
            e.u32(tag);
            e.usize(k);
            e.f64(schedule.tau_min);
            e.f64(schedule.tau_max);
            e.f64(schedule.tau_star);
            e.usize(schedule.n_steps);
            e.usize(*mc_taus);
            match affine {
                Some(a) => {
                    e.u32(1);
                    a.shift.iter().chain(&a.scale).for_each(|&v| e.f64(v));
                }
                None => e.u32(0),
            }
            e.mlp(&score.net);
        }
        Checkpoint::Model(GenModel::Flow(flow)) => {
            e.usize(flow.d_x);
            e.usize(flow.d_c);
            e.u32(match flow.base {
                BaseDensity::StdGaussian => 0,
                BaseDensity::UniformLogit => 1,
            });
            e.usize(flow.layers.len());
            for layer in &flow.layers {
                match layer {
                    FlowLayer::Coupling(c) => {
                        e.u32(0);
                        e.u32(match c.kind {
                            CouplingKind::Additive => 0,
                            CouplingKind::Affine => 1,
                        });
                        e.f64(c.log_scale_bound);
                        e.idx(&c.part1);
                        e.idx(&c.part2);
                        e.mlp(&c.omega);
                    }
                    FlowLayer::Permutation(p) => {
                        e.u32(1);
                        e.idx(p);
                    }
                }
            }
        }
        Checkpoint::Embedding(m) => {
            e.u32(u32::from(m.frozen));
            e.idx(&m.passthrough_idx);
            e.mlp(&m.net);
        }
        Checkpoint::Decoder(m) => e.mlp(&m.net),
    }
    e.0
}

fn bad(e: Error) -> Error {
    match e {
        Error::Format(_) => e,
        other => Error::Format(other.to_string()),
    }
}

fn is_permutation(p: &[usize], d: usize) -> bool {
    let mut seen = vec![false; d];
    p.len() == d && p.iter().all(|&i| i < d && !std::mem::replace(&mut seen[i], true))
}

fn decode_flow(d: &mut Dec<'_>) -> Result<CouplingFlow> {
    let (d_x, d_c) = (d.usize()?, d.usize()?);
    let base = match d.u32()? {
        0 => BaseDensity::StdGaussian,
        1 => BaseDensity::UniformLogit,
        t => return Err(Error::Format(format!("unknown base tag {t}"))),
    };
    let n = d.len(4)?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        layers.push(match d.u32()? {
            0 => {
                let kind = match d.u32()? {
                    0 => CouplingKind::Additive,
                    1 => CouplingKind::Affine,
                    t => return Err(Error::Format(format!("unknown coupling tag {t}"))),
                };
                let log_scale_bound = d.f64()?;
                let (part1, part2) = (d.idx()?, d.idx()?);
                let omega = d.mlp()?;
                let mut all: Vec<usize> = part1.iter().chain(&part2).copied().collect();
                all.sort_unstable();
                let out = if kind == CouplingKind::Affine { 2 } else { 1 } * part2.len();
                if !is_permutation(&all, d_x)
                    || omega.input_dim() != part1.len() + d_c
                    || omega.output_dim() != out
                {
                    return Err(Error::Format("coupling layer shape does not match the flow header".into()));
                }
                FlowLayer::Coupling(CouplingLayer {
                    kind,
                    part1,
                    part2,
                    omega,
                    log_scale_bound,
                })
            }
            1 => {
                let p = d.idx()?;
                if !is_permutation(&p, d_x) {
                    return Err(Error::Format("invalid permutation layer".into()));
                }
                FlowLayer::Permutation(p)
            }
            t => return Err(Error::Format(format!("unknown layer tag {t}"))),
        });
    }
    Ok(CouplingFlow { layers, d_x, d_c, base })
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let (kind, mut d) = open(buf)?;
    let ck = match kind {
        CheckpointKind::Diffusion => {
            let (d_x, d_c) = (d.usize()?, d.usize()?);
            let tau_embed = match (d.u32()?, d.usize()?) {
                (0, _) => TauEmbed::Raw,
                (1, _) => TauEmbed::Log,
                (2, k) => TauEmbed::Sinusoidal(k),
                (t, _) => return Err(Error::Format(format!("unknown tau embedding tag {t}"))),
            };
            let schedule = NoiseSchedule::new(d.f64()?, d.f64()?, d.f64()?, d.usize()?).map_err(bad)?;
            let mc_taus = d.usize()?;
            let affine = match d.u32()? {
                0 => None,
                1 => {
                    let shift = (0..d_x).map(|_| d.f64()).collect::<Result<Vec<_>>>()?;
                    let scale = (0..d_x).map(|_| d.f64()).collect::<Result<Vec<_>>>()?;
                    if scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                        return Err(Error::Format("standardizer scale must be positive".into()));
                    }
                    Some(Standardizer { shift, scale })
                }
                t => return Err(Error::Format(format!("unknown standardizer tag {t}"))),
            };
            let net = d.mlp()?;
            if net.input_dim() != d_x + d_c + tau_embed.dim() || net.output_dim() != d_x {
                return Err(Error::Format("score network shape does not match the header".into()));
            }
            Checkpoint::Model(GenModel::Diffusion {
                score: ScoreModel {
                    net,
                    d_x,
                    d_c,
                    tau_embed,
                },
                schedule,
                mc_taus,
                affine,
            })
        }
        CheckpointKind::Flow => Checkpoint::Model(GenModel::Flow(decode_flow(&mut d)?)),
        CheckpointKind::Embedding => {
            let frozen = d.u32()? != 0;
            let passthrough_idx = d.idx()?;
            let net = d.mlp()?;
            if passthrough_idx.iter().any(|&i| i >= net.input_dim()) {
                return Err(Error::Format("passthrough index out of range".into()));
            }
            Checkpoint::Embedding(EmbeddingMap {
                net,
                frozen,
                passthrough_idx,
            })
        }
        CheckpointKind::Decoder => Checkpoint::Decoder(DecoderMap { net: d.mlp()? }),
    };
    d.finish()?;
    Ok(ck)
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

fn component_files(fitted: &Fitted) -> Vec<(&'static str, Checkpoint)> {
    match fitted {
        Fitted::Conditional { model, embed } => vec![
            ("model.gxf", Checkpoint::Model(model.clone())),
            ("embedding.gxf", Checkpoint::Embedding(embed.clone())),
        ],
        Fitted::Unconditional { prior, decoder } => vec![
            ("prior.gxf", Checkpoint::Model(prior.clone())),
            ("decoder.gxf", Checkpoint::Decoder(decoder.clone())),
        ],
    }
}

/// Writes the fitted components and a manifest describing the plan.
pub fn save_pipeline(p: &FittedPipeline, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let files = component_files(&p.fitted);
    for (name, ck) in &files {
        save_checkpoint(ck, &dir.join(name))?;
    }
    let plan = &p.plan;
    let d = &plan.dims;
    let mut m = String::new();
    let _ = writeln!(m, "format=GXF1");
    let _ = writeln!(m, "family={}", plan.family);
    let _ = writeln!(m, "mode={}", plan.mode);
    let _ = writeln!(m, "regime={}", plan.regime);
    let _ = writeln!(m, "d_x_s={}\nd_x_t={}\nd_z={}\nd_h={}\nd_u={}", d.d_x_s, d.d_x_t, d.d_z, d.d_h, d.d_u);
    let _ = writeln!(m, "source_seed={}", plan.source_opts.seed);
    let _ = writeln!(m, "target_seed={}", plan.target_opts.seed);
    let _ = writeln!(m, "decoder_seed={}", plan.decoder_opts.seed);
    if let Some((before, after)) = p.embed_hash {
        let _ = writeln!(m, "embed_hash_before={before:016x}\nembed_hash_after={after:016x}");
    }
    let names: Vec<&str> = files.iter().map(|(n, _)| *n).collect();
    let _ = writeln!(m, "files={}", names.join(","));
    std::fs::write(dir.join(MANIFEST), m)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    let mut out = BTreeMap::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("manifest line {}: expected key=value", k + 1)))?;
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

/// Loads what `generate` needs from a pipeline directory.
pub fn load_pipeline(dir: &Path) -> Result<(BTreeMap<String, String>, Fitted)> {
    let manifest = read_manifest(dir)?;
    let get = |k: &str| {
        manifest
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Parse(format!("manifest lacks {k}")))
    };
    let family = Family::parse(get("family")?)?;
    let mode = Mode::parse(get("mode")?)?;
    let fitted = match mode {
        Mode::Conditional => {
            let model = match load_checkpoint(&dir.join("model.gxf"))? {
                Checkpoint::Model(m) => m,
                _ => return Err(Error::Format("model.gxf is not a generative model".into())),
            };
            let embed = match load_checkpoint(&dir.join("embedding.gxf"))? {
                Checkpoint::Embedding(e) => e,
                _ => return Err(Error::Format("embedding.gxf is not an embedding".into())),
            };
            if embed.output_dim() != model.d_c() {
                return Err(Error::Dimension("embedding output does not feed the model".into()));
            }
            Fitted::Conditional { model, embed }
        }
        Mode::Unconditional => {
            let prior = match load_checkpoint(&dir.join("prior.gxf"))? {
                Checkpoint::Model(m) => m,
                _ => return Err(Error::Format("prior.gxf is not a generative model".into())),
            };
            let decoder = match load_checkpoint(&dir.join("decoder.gxf"))? {
                Checkpoint::Decoder(d) => d,
                _ => return Err(Error::Format("decoder.gxf is not a decoder".into())),
            };
            if decoder.net.input_dim() != prior.d_x() {
                return Err(Error::Dimension("prior draws do not feed the decoder".into()));
            }
            Fitted::Unconditional { prior, decoder }
        }
    };
    let model_family = match &fitted {
        Fitted::Conditional { model, .. } => model.family(),
        Fitted::Unconditional { prior, .. } => prior.family(),
    };
    if model_family != family {
        return Err(Error::Format(format!("manifest says {family}, checkpoint holds {model_family}")));
    }
    Ok((manifest, fitted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::FlowConfig;
    use crate::nn::NetShape;
    use crate::rng::seeded;

    fn flow() -> CouplingFlow {
        let cfg = FlowConfig {
            zero_init: false,
            ..FlowConfig::default()
        };
        CouplingFlow::new(3, 2, &cfg, BaseDensity::UniformLogit, &mut seeded(1)).unwrap()
    }

    #[test]
    fn round_trips() {
        let shape = NetShape::new(8, 2, Activation::Tanh);
        let items = vec![
            Checkpoint::Model(GenModel::Flow(flow())),
            Checkpoint::Model(GenModel::Diffusion {
                score: ScoreModel::new(2, 1, TauEmbed::Sinusoidal(2), shape, &mut seeded(2)).unwrap(),
                schedule: NoiseSchedule::default(),
                mc_taus: 3,
                affine: Some(Standardizer {
                    shift: vec![1.5, -2.0],
                    scale: vec![0.5, 3.0],
                }),
            }),
            Checkpoint::Embedding(EmbeddingMap::new(3, 2, shape, vec![0], &mut seeded(3)).unwrap()),
            Checkpoint::Decoder(DecoderMap::new(2, 3, shape, &mut seeded(4)).unwrap()),
        ];
        for ck in items {
            assert_eq!(decode(&encode(&ck)).unwrap(), ck);
        }
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = encode(&Checkpoint::Model(GenModel::Flow(flow())));
        let mut wrong = bytes.clone();
        wrong[3] = b'2';
        assert!(matches!(decode(&wrong), Err(Error::Format(_))));
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(decode(&wrong).unwrap_err().to_string().contains("version"));
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(decode(&longer).is_err());
        assert!(decode(b"GX").is_err());
    }
}
