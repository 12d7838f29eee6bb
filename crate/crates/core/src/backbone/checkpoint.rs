//! Backbone checkpoint directories.
//!
//! A checkpoint is a directory holding `config.json` (dimensions, layer
//! counts, patch size, activation, optional vocabulary) and
//! `model.safetensors` with tensors named as in the OpenCLIP release:
//!
//! | tensor | shape |
//! |---|---|
//! | `visual.conv1.weight` | `d × 3 × p × p` |
//! | `visual.class_embedding` | `d` |
//! | `visual.positional_embedding` | `(g_h·g_w + 1) × d` |
//! | `visual.ln_pre.{weight,bias}`, `visual.ln_post.{weight,bias}` | `d` |
//! | `visual.transformer.resblocks.{i}.ln_1.{weight,bias}` (and `ln_2`) | `d` |
//! | `visual.transformer.resblocks.{i}.attn.in_proj_weight` | `3d × d` |
//! | `visual.transformer.resblocks.{i}.attn.in_proj_bias` | `3d` |
//! | `visual.transformer.resblocks.{i}.attn.out_proj.{weight,bias}` | `d × d`, `d` |
//! | `visual.transformer.resblocks.{i}.mlp.c_fc.{weight,bias}` | `4d × d`, `4d` |
//! | `visual.transformer.resblocks.{i}.mlp.c_proj.{weight,bias}` | `d × 4d`, `d` |
//! | `visual.proj` | `d × embed_dim` |
//! | `token_embedding.weight` | `vocab × d_t` |
//! | `positional_embedding` | `V × d_t` |
//! | `transformer.resblocks.{i}.*` | as the visual blocks, width `d_t` |
//! | `ln_final.{weight,bias}` | `d_t` |
//! | `text_projection` | `d_t × embed_dim` |
//!
//! Linear weights are stored `out × in` and transposed on load. Tensors may
//! be `F64`, `F32`, `F16` or `BF16`. When the requested input size differs
//! from the checkpoint's, the positional grid is resampled bilinearly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::text::{TextBackboneSpec, TextEncoder, Tokenizer};
use super::transformer::{LayerNorm, Linear, ResidualBlock};
use super::vision::{VisionBackboneSpec, VisionEncoder};
use super::Backbone;
use crate::autograd::{Activation, BilinearPlan, Tensor};
use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "model.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionMeta {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    #[serde(default = "yes")]
    pub class_token: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextMeta {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub context_length: usize,
    pub vocab_size: usize,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationName {
    Gelu,
    QuickGelu,
}

/// Contents of `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub embed_dim: usize,
    pub activation: ActivationName,
    pub vision: VisionMeta,
    pub text: TextMeta,
    pub start_token: usize,
    pub end_token: usize,
    /// Word list indexed by token id. Unknown words hash into the id space.
    #[serde(default)]
    pub vocab: Vec<String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn to_activation(a: &ActivationName) -> Activation {
    match a {
        ActivationName::Gelu => Activation::Gelu,
        ActivationName::QuickGelu => Activation::QuickGelu,
    }
}

struct Reader<'a> {
    st: SafeTensors<'a>,
}

impl Reader<'_> {
    /// Reads `name` as a row-major tensor with `shape` flattened to 2-D
    /// (leading dim × product of the rest; 1-D tensors become `1×n`).
    fn read(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let view = self
            .st
            .tensor(name)
            .map_err(|_| bad(format!("missing tensor `{name}`")))?;
        if view.shape() != shape {
            return Err(bad(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                view.shape(),
                shape
            )));
        }
        let data = view.data();
        let values: Vec<f64> = match view.dtype() {
            Dtype::F64 => data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F16 => data
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
            Dtype::BF16 => data
                .chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
            other => return Err(bad(format!("tensor `{name}` has unsupported dtype {other:?}"))),
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("tensor `{name}` contains non-finite values")));
        }
        let (rows, cols) = match shape {
            [n] => (1, *n),
            [r, rest @ ..] => (*r, rest.iter().product()),
            [] => (1, 1),
        };
        Tensor::from_shape_vec((rows, cols), values).map_err(|e| bad(e.to_string()))
    }

    fn arc(&self, name: &str, shape: &[usize]) -> Result<Arc<Tensor>> {
        self.read(name, shape).map(Arc::new)
    }

    fn linear(&self, prefix: &str, inp: usize, out: usize) -> Result<Linear> {
        Ok(Linear {
            weight: Arc::new(self.read(&format!("{prefix}.weight"), &[out, inp])?.reversed_axes().as_standard_layout().into_owned()),
            bias: self.arc(&format!("{prefix}.bias"), &[out])?,
        })
    }

    fn layer_norm(&self, prefix: &str, d: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: self.arc(&format!("{prefix}.weight"), &[d])?,
            bias: self.arc(&format!("{prefix}.bias"), &[d])?,
        })
    }

    fn block(&self, prefix: &str, d: usize) -> Result<ResidualBlock> {
        let in_w = self.read(&format!("{prefix}.attn.in_proj_weight"), &[3 * d, d])?;
        Ok(ResidualBlock {
            ln_1: self.layer_norm(&format!("{prefix}.ln_1"), d)?,
            attn_in: Linear {
                weight: Arc::new(in_w.reversed_axes().as_standard_layout().into_owned()),
                bias: self.arc(&format!("{prefix}.attn.in_proj_bias"), &[3 * d])?,
            },
            attn_out: self.linear(&format!("{prefix}.attn.out_proj"), d, d)?,
            ln_2: self.layer_norm(&format!("{prefix}.ln_2"), d)?,
            mlp_fc: self.linear(&format!("{prefix}.mlp.c_fc"), d, 4 * d)?,
            mlp_proj: self.linear(&format!("{prefix}.mlp.c_proj"), 4 * d, d)?,
        })
    }
}

/// Resamples the patch part of a `(1 + g0²) × d` (or `g0² × d`) positional
/// table onto a `g1×g1` grid, keeping the class row.
fn resample_positional(pos: &Tensor, class_token: bool, from: usize, to: usize) -> Tensor {
    let skip = usize::from(class_token);
    let grid = pos.slice(ndarray::s![skip.., ..]).to_owned();
    let resampled = BilinearPlan::new((from, from), (to, to)).apply(&grid);
    if class_token {
        ndarray::concatenate![ndarray::Axis(0), pos.slice(ndarray::s![0..1, ..]), resampled]
    } else {
        resampled
    }
}

/// Loads a checkpoint directory.
///
/// `input_size` overrides the checkpoint's image size; it must be a multiple
/// of the patch size.
pub fn load_pretrained(dir: impl AsRef<Path>, input_size: Option<usize>) -> Result<Backbone> {
    let dir = dir.as_ref();
    let meta_path = dir.join(CONFIG_FILE);
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_text)
        .map_err(|e| bad(format!("{}: {e}", meta_path.display())))?;
    let weights_path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(format!("{}: {e}", weights_path.display())))?;
    from_parts(&meta, &Reader { st }, input_size)
}

fn from_parts(meta: &CheckpointMeta, r: &Reader<'_>, input_size: Option<usize>) -> Result<Backbone> {
    let v = &meta.vision;
    let t = &meta.text;
    let e = meta.embed_dim;
    for (what, width, heads) in [("vision", v.width, v.heads), ("text", t.width, t.heads)] {
        if heads == 0 || width % heads != 0 {
            return Err(bad(format!("{what} width {width} not divisible by {heads} heads")));
        }
    }
    if v.patch_size == 0 || v.image_size % v.patch_size != 0 {
        return Err(bad(format!(
            "image size {} not a multiple of patch size {}",
            v.image_size, v.patch_size
        )));
    }
    let size = input_size.unwrap_or(v.image_size);
    if size == 0 || size % v.patch_size != 0 {
        return Err(Error::arg(
            "input_size",
            format!("{size} is not a positive multiple of patch size {}", v.patch_size),
        ));
    }
    if meta.start_token >= t.vocab_size || meta.end_token >= t.vocab_size {
        return Err(bad("start/end token outside vocabulary"));
    }

    let d = v.width;
    let p = v.patch_size;
    let g0 = v.image_size / p;
    let g1 = size / p;
    let skip = usize::from(v.class_token);

    let conv = r.read("visual.conv1.weight", &[d, 3, p, p])?;
    let pos = r.read("visual.positional_embedding", &[g0 * g0 + skip, d])?;
    let pos = if g0 == g1 { pos } else { resample_positional(&pos, v.class_token, g0, g1) };
    let vision = VisionEncoder {
        spec: VisionBackboneSpec {
            layer_count: v.layers,
            token_dim: d,
            heads: v.heads,
            patch_size: p,
            input_size: size,
            patch_grid: (g1, g1),
            class_token: v.class_token,
            embed_dim: e,
        },
        activation: to_activation(&meta.activation),
        patch_embed: Arc::new(conv.reversed_axes().as_standard_layout().into_owned()),
        class_embedding: if v.class_token {
            r.arc("visual.class_embedding", &[d])?
        } else {
            Arc::new(Tensor::zeros((1, d)))
        },
        positional: Arc::new(pos),
        ln_pre: r.layer_norm("visual.ln_pre", d)?,
        blocks: (0..v.layers)
            .map(|i| r.block(&format!("visual.transformer.resblocks.{i}"), d))
            .collect::<Result<_>>()?,
        ln_post: r.layer_norm("visual.ln_post", d)?,
        projection: r.arc("visual.proj", &[d, e])?,
    };

    let dt = t.width;
    let text = TextEncoder {
        spec: TextBackboneSpec {
            layer_count: t.layers,
            token_dim: dt,
            heads: t.heads,
            max_sequence: t.context_length,
            vocab_size: t.vocab_size,
            embed_dim: e,
        },
        activation: to_activation(&meta.activation),
        token_embedding: r.arc("token_embedding.weight", &[t.vocab_size, dt])?,
        positional: r.arc("positional_embedding", &[t.context_length, dt])?,
        blocks: (0..t.layers)
            .map(|i| r.block(&format!("transformer.resblocks.{i}"), dt))
            .collect::<Result<_>>()?,
        ln_final: r.layer_norm("ln_final", dt)?,
        projection: r.arc("text_projection", &[dt, e])?,
    };
    let tokenizer = Tokenizer::new(&meta.vocab, t.vocab_size, meta.start_token, meta.end_token);
    Ok(Backbone {
        vision,
        text,
        tokenizer,
        vocab: meta.vocab.clone(),
    })
}

fn transposed(t: &Tensor) -> Tensor {
    t.t().as_standard_layout().into_owned()
}

/// `(name, on-disk shape, row-major data)` for every weight.
fn disk_entries(b: &Backbone) -> Vec<(String, Vec<usize>, Arc<Tensor>)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, t: Arc<Tensor>| out.push((name, shape, t));
    let row = |t: &Arc<Tensor>| vec![t.len()];

    fn blocks(
        push: &mut dyn FnMut(String, Vec<usize>, Arc<Tensor>),
        prefix: &str,
        blocks: &[ResidualBlock],
    ) {
        for (i, blk) in blocks.iter().enumerate() {
            let p = format!("{prefix}.{i}");
            let lin = |push: &mut dyn FnMut(String, Vec<usize>, Arc<Tensor>), name: &str, wname: &str, bname: &str, l: &Linear| {
                push(format!("{p}.{name}{wname}"), vec![l.out_dim(), l.in_dim()], Arc::new(transposed(&l.weight)));
                push(format!("{p}.{name}{bname}"), vec![l.out_dim()], Arc::clone(&l.bias));
            };
            for (n, ln) in [("ln_1", &blk.ln_1), ("ln_2", &blk.ln_2)] {
                push(format!("{p}.{n}.weight"), vec![ln.gain.len()], Arc::clone(&ln.gain));
                push(format!("{p}.{n}.bias"), vec![ln.bias.len()], Arc::clone(&ln.bias));
            }
            lin(push, "attn.", "in_proj_weight", "in_proj_bias", &blk.attn_in);
            lin(push, "attn.out_proj.", "weight", "bias", &blk.attn_out);
            lin(push, "mlp.c_fc.", "weight", "bias", &blk.mlp_fc);
            lin(push, "mlp.c_proj.", "weight", "bias", &blk.mlp_proj);
        }
    }

    let v = &b.vision;
    let d = v.spec.token_dim;
    let p = v.spec.patch_size;
    push("visual.conv1.weight".into(), vec![d, 3, p, p], Arc::new(transposed(&v.patch_embed)));
    if v.spec.class_token {
        push("visual.class_embedding".into(), vec![d], Arc::clone(&v.class_embedding));
    }
    push("visual.positional_embedding".into(), vec![v.positional.nrows(), d], Arc::clone(&v.positional));
    for (n, ln) in [("visual.ln_pre", &v.ln_pre), ("visual.ln_post", &v.ln_post), ("ln_final", &b.text.ln_final)] {
        push(format!("{n}.weight"), row(&ln.gain), Arc::clone(&ln.gain));
        push(format!("{n}.bias"), row(&ln.bias), Arc::clone(&ln.bias));
    }
    blocks(&mut push, "visual.transformer.resblocks", &v.blocks);
    push("visual.proj".into(), vec![d, v.spec.embed_dim], Arc::clone(&v.projection));

    let t = &b.text;
    push("token_embedding.weight".into(), vec![t.spec.vocab_size, t.spec.token_dim], Arc::clone(&t.token_embedding));
    push("positional_embedding".into(), vec![t.positional.nrows(), t.spec.token_dim], Arc::clone(&t.positional));
    blocks(&mut push, "transformer.resblocks", &t.blocks);
    push("text_projection".into(), vec![t.spec.token_dim, t.spec.embed_dim], Arc::clone(&t.projection));
    out
}

pub(crate) fn export_tensors(b: &Backbone) -> Vec<(String, Arc<Tensor>)> {
    disk_entries(b).into_iter().map(|(n, _, t)| (n, t)).collect()
}

pub fn checkpoint_meta(b: &Backbone) -> CheckpointMeta {
    let v = &b.vision.spec;
    let t = &b.text.spec;
    let activation = match b.vision.activation {
        Activation::Gelu => ActivationName::Gelu,
        Activation::QuickGelu => ActivationName::QuickGelu,
    };
    CheckpointMeta {
        embed_dim: v.embed_dim,
        activation,
        vision: VisionMeta {
            layers: v.layer_count,
            width: v.token_dim,
            heads: v.heads,
            patch_size: v.patch_size,
            image_size: v.input_size,
            class_token: v.class_token,
        },
        text: TextMeta {
            layers: t.layer_count,
            width: t.token_dim,
            heads: t.heads,
            context_length: t.max_sequence,
            vocab_size: t.vocab_size,
        },
        start_token: b.tokenizer.start_token,
        end_token: b.tokenizer.end_token,
        vocab: b.vocab.clone(),
    }
}

/// Writes `b` as a checkpoint directory (f64 weights).
pub fn save_pretrained(b: &Backbone, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = serde_json::to_string_pretty(&checkpoint_meta(b)).map_err(|e| bad(e.to_string()))?;
    let meta_path = dir.join(CONFIG_FILE);
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    let weights_path = dir.join(WEIGHTS_FILE);
    write_safetensors(&weights_path, disk_entries(b), None)
}

/// Reads every tensor in a safetensors file, flattened to 2-D, plus the
/// header metadata.
pub(crate) fn read_safetensors(path: &Path) -> Result<(Vec<(String, Tensor)>, HashMap<String, String>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    let r = Reader { st };
    let mut names: Vec<String> = r.st.names().into_iter().map(String::from).collect();
    names.sort();
    let out = names
        .into_iter()
        .map(|n| {
            let shape = r.st.tensor(&n).map_err(|e| bad(e.to_string()))?.shape().to_vec();
            r.read(&n, &shape).map(|t| (n, t))
        })
        .collect::<Result<_>>()?;
    Ok((out, meta))
}

/// Serialises f64 tensors with explicit on-disk shapes.
pub(crate) fn write_safetensors(
    path: &Path,
    entries: Vec<(String, Vec<usize>, Arc<Tensor>)>,
    metadata: Option<HashMap<String, String>>,
) -> Result<()> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = entries
        .into_iter()
        .map(|(n, s, t)| {
            let data = t.iter().flat_map(|v| v.to_le_bytes()).collect();
            (n, s, data)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(n, s, data)| {
            safetensors::tensor::TensorView::new(Dtype::F64, s.clone(), data)
                .map(|v| (n.as_str(), v))
                .map_err(|e| bad(format!("{n}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = safetensors::serialize(views, metadata).map_err(|e| bad(e.to_string()))?;
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{make_toy_backbone, Hooks, ToyBackboneConfig};
    use crate::data::Image;

    #[test]
    fn round_trip_preserves_forward_pass() {
        let b = make_toy_backbone(2, 16, 8, 11);
        let dir = tempfile::tempdir().unwrap();
        save_pretrained(&b, dir.path()).unwrap();
        let c = load_pretrained(dir.path(), None).unwrap();
        assert_eq!(b.checksum(), c.checksum());
        let img = Image::from_fn(32, 32, |y, x, ch| ((y + 2 * x + ch) % 7) as f64 / 6.0);
        assert_eq!(
            b.encode_image_layers(&img, &Hooks::none()).unwrap(),
            c.encode_image_layers(&img, &Hooks::none()).unwrap()
        );
        assert_eq!(b.tokenizer.encode("lens flare"), c.tokenizer.encode("lens flare"));
    }

    fn vit_l_shaped() -> Backbone {
        // ViT-L/14 geometry (24 layers, patch 14, 224 input) at a tiny width.
        ToyBackboneConfig {
            layers: 24,
            token_dim: 8,
            embed_dim: 4,
            heads: 1,
            patch_size: 14,
            input_size: 224,
            text_layers: 12,
            max_sequence: 16,
            vocab_size: 40,
            seed: 5,
        }
        .build()
    }

    #[test]
    fn vit_l_shaped_checkpoint_at_518() {
        let dir = tempfile::tempdir().unwrap();
        save_pretrained(&vit_l_shaped(), dir.path()).unwrap();
        let b = load_pretrained(dir.path(), Some(518)).unwrap();
        assert_eq!(b.vision.spec.layer_count, 24);
        assert_eq!(b.vision.spec.patch_grid, (37, 37));
        assert_eq!(b.vision.positional.nrows(), 37 * 37 + 1);
        assert!(load_pretrained(dir.path(), Some(500)).is_err());
    }

    #[test]
    fn wrong_embed_dim_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let b = make_toy_backbone(2, 16, 8, 1);
        save_pretrained(&b, dir.path()).unwrap();
        let mut meta = checkpoint_meta(&b);
        meta.embed_dim = 12;
        fs::write(dir.path().join(CONFIG_FILE), serde_json::to_string(&meta).unwrap()).unwrap();
        let err = load_pretrained(dir.path(), None).unwrap_err();
        assert!(err.to_string().contains("visual.proj"), "{err}");
    }

    #[test]
    fn corrupt_weights_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_pretrained(&make_toy_backbone(1, 16, 8, 1), dir.path()).unwrap();
        fs::write(dir.path().join(WEIGHTS_FILE), b"not a safetensors file").unwrap();
        assert!(matches!(load_pretrained(dir.path(), None), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn half_precision_weights_load() {
        let b = make_toy_backbone(1, 16, 8, 2);
        let dir = tempfile::tempdir().unwrap();
        save_pretrained(&b, dir.path()).unwrap();
        // Re-encode every tensor as f32.
        let bytes = fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
        let st = SafeTensors::deserialize(&bytes).unwrap();
        let converted: Vec<(String, Vec<usize>, Vec<u8>)> = st
            .tensors()
            .into_iter()
            .map(|(n, v)| {
                let data = v
                    .data()
                    .chunks_exact(8)
                    .flat_map(|c| (f64::from_le_bytes(c.try_into().unwrap()) as f32).to_le_bytes())
                    .collect();
                (n, v.shape().to_vec(), data)
            })
            .collect();
        let views: Vec<_> = converted
            .iter()
            .map(|(n, s, d)| (n.clone(), safetensors::tensor::TensorView::new(Dtype::F32, s.clone(), d).unwrap()))
            .collect();
        fs::write(dir.path().join(WEIGHTS_FILE), safetensors::serialize(views, None).unwrap()).unwrap();
        let c = load_pretrained(dir.path(), None).unwrap();
        let diff = (&*b.vision.projection - &*c.vision.projection).mapv(f64::abs);
        assert!(diff.iter().all(|&x| x < 1e-6));
    }
}
