//! Small parameter-store and layer plumbing on top of candle.
//!
//! Parameters are named, seeded deterministically at construction, and
//! serialized as a safetensors archive plus a JSON manifest (names, shapes,
//! sha256). Requesting an existing name returns the existing storage, which
//! is how weight sharing between modules is expressed.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal(0, sqrt(2 / fan)).
    KaimingNormal { fan: usize },
    Zeros,
    Ones,
}

struct Param {
    var: Var,
    trainable: bool,
}

/// Named parameter registry backing one model instance.
pub struct ParamStore {
    device: Device,
    inner: RefCell<BTreeMap<String, Param>>,
}

/// Outcome of loading an archive into a store.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadReport {
    pub matched: Vec<String>,
    /// Parameters the store expected but the archive did not provide.
    pub missing: Vec<String>,
    /// Archive tensors no parameter asked for.
    pub unused: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveManifest {
    names: Vec<ArchiveManifestEntry>,
    sha256: String,
}

fn manifest_path(archive: &Path) -> PathBuf {
    let mut os = archive.as_os_str().to_owned();
    os.push(".manifest.json");
    PathBuf::from(os)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut hex = String::new();
    for b in digest {
        let _ = write!(hex, "{b:02x}");
    }
    hex
}

impl ParamStore {
    pub fn new(device: Device) -> Self {
        ParamStore {
            device,
            inner: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Create (or retrieve) a named parameter. A second request for the same
    /// name returns the same storage and consumes no randomness.
    pub fn var(
        &self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Result<Var> {
        if let Some(p) = self.inner.borrow().get(name) {
            if p.var.dims() != shape {
                return Err(Error::Config(format!(
                    "parameter `{name}` requested with shape {shape:?} but exists as {:?}",
                    p.var.dims()
                )));
            }
            return Ok(p.var.clone());
        }
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::KaimingNormal { fan } => {
                let std = (2.0 / fan as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                (0..numel).map(|_| normal.sample(rng) as f32).collect()
            }
        };
        let tensor = Tensor::from_vec(data, shape, &self.device)?;
        let var = Var::from_tensor(&tensor)?;
        self.inner.borrow_mut().insert(
            name.to_string(),
            Param {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.borrow().get(name).map(|p| p.var.clone())
    }

    pub fn names(&self) -> Vec<String> {
        self.inner.borrow().keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.borrow().is_empty()
    }

    /// Trainable parameters in stable (name-sorted) order.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.inner
            .borrow()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, p)| (n.clone(), p.var.clone()))
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.inner
            .borrow()
            .values()
            .map(|p| p.var.dims().iter().product::<usize>())
            .sum()
    }

    /// Serialize every parameter into `<path>` (safetensors) and write the
    /// sibling `<path>.manifest.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let inner = self.inner.borrow();
        let mut tensors = std::collections::HashMap::new();
        let mut entries = Vec::new();
        for (name, p) in inner.iter() {
            tensors.insert(name.clone(), p.var.as_tensor().clone());
            entries.push(ArchiveManifestEntry {
                name: name.clone(),
                shape: p.var.dims().to_vec(),
            });
        }
        candle_core::safetensors::save(&tensors, path)?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let manifest = ArchiveManifest {
            names: entries,
            sha256: sha256_hex(&bytes),
        };
        let mpath = manifest_path(path);
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
        std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
        Ok(())
    }

    /// Load named tensors into matching parameters. `prefix` restricts which
    /// store parameters participate; in strict mode any participating
    /// parameter absent from the archive is an error. Shape mismatches are
    /// always errors, named explicitly.
    pub fn load(&self, path: &Path, prefix: Option<&str>, strict: bool) -> Result<LoadReport> {
        let mpath = manifest_path(path);
        if mpath.exists() {
            let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
            let manifest: ArchiveManifest = serde_json::from_str(&text)
                .map_err(|e| Error::Data(format!("{}: bad manifest: {e}", mpath.display())))?;
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let got = sha256_hex(&bytes);
            if got != manifest.sha256 {
                return Err(Error::Data(format!(
                    "{}: archive checksum {got} does not match manifest {}",
                    path.display(),
                    manifest.sha256
                )));
            }
        }
        let loaded = candle_core::safetensors::load(path, &self.device)?;
        let inner = self.inner.borrow();
        let mut report = LoadReport {
            matched: Vec::new(),
            missing: Vec::new(),
            unused: Vec::new(),
        };
        for (name, p) in inner.iter() {
            if let Some(pref) = prefix {
                if !name.starts_with(pref) {
                    continue;
                }
            }
            match loaded.get(name) {
                Some(t) => {
                    if t.dims() != p.var.dims() {
                        return Err(Error::Data(format!(
                            "{}: tensor `{name}` has shape {:?}, expected {:?}",
                            path.display(),
                            t.dims(),
                            p.var.dims()
                        )));
                    }
                    p.var.set(&t.to_dtype(DType::F32)?)?;
                    report.matched.push(name.clone());
                }
                None => report.missing.push(name.clone()),
            }
        }
        for name in loaded.keys() {
            let wanted = inner.contains_key(name)
                && prefix.map_or(true, |pref| name.starts_with(pref));
            if !wanted {
                report.unused.push(name.clone());
            }
        }
        report.unused.sort();
        if strict && !report.missing.is_empty() {
            return Err(Error::Data(format!(
                "{}: strict load failed, {} parameters unmatched (first: {})",
                path.display(),
                report.missing.len(),
                report.missing[0]
            )));
        }
        Ok(report)
    }
}

/// 2-D convolution with owned parameters.
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.var(
            &format!("{name}.weight"),
            &[out_c, in_c, k, k],
            Init::KaimingNormal { fan: in_c * k * k },
            rng,
            true,
        )?;
        let bias = store.var(&format!("{name}.bias"), &[out_c], Init::Zeros, rng, true)?;
        Ok(Conv2d {
            weight,
            bias: Some(bias),
            stride,
            padding,
            dilation,
        })
    }

    /// Convolution without bias (backbone convs are all followed by BN).
    #[allow(clippy::too_many_arguments)]
    pub fn new_no_bias(
        store: &ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.var(
            &format!("{name}.weight"),
            &[out_c, in_c, k, k],
            Init::KaimingNormal { fan: in_c * k * k },
            rng,
            true,
        )?;
        Ok(Conv2d {
            weight,
            bias: None,
            stride,
            padding,
            dilation,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv2d(
            self.weight.as_tensor(),
            self.padding,
            self.stride,
            self.dilation,
            1,
        )?;
        match &self.bias {
            Some(b) => {
                let c = b.dims()[0];
                y.broadcast_add(&b.reshape((1, c, 1, 1))?)
            }
            None => Ok(y),
        }
    }
}

/// Transposed 2-D convolution with owned parameters.
pub struct ConvTranspose2d {
    pub weight: Var,
    pub bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.var(
            &format!("{name}.weight"),
            &[in_c, out_c, k, k],
            Init::KaimingNormal { fan: out_c * k * k },
            rng,
            true,
        )?;
        let bias = store.var(&format!("{name}.bias"), &[out_c], Init::Zeros, rng, true)?;
        Ok(ConvTranspose2d {
            weight,
            bias: Some(bias),
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv_transpose2d(self.weight.as_tensor(), self.padding, 0, self.stride, 1)?;
        match &self.bias {
            Some(b) => {
                let c = b.dims()[0];
                y.broadcast_add(&b.reshape((1, c, 1, 1))?)
            }
            None => Ok(y),
        }
    }
}

/// Batch normalization with frozen statistics: the affine pair trains, the
/// running mean/variance are constants (identity unless loaded from an
/// archive). Small fine-tuning batches make live statistics unusable.
pub struct FrozenBatchNorm {
    pub weight: Var,
    pub bias: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
}

impl FrozenBatchNorm {
    pub fn new(store: &ParamStore, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(FrozenBatchNorm {
            weight: store.var(&format!("{name}.weight"), &[c], Init::Ones, rng, true)?,
            bias: store.var(&format!("{name}.bias"), &[c], Init::Zeros, rng, true)?,
            running_mean: store.var(
                &format!("{name}.running_mean"),
                &[c],
                Init::Zeros,
                rng,
                false,
            )?,
            running_var: store.var(
                &format!("{name}.running_var"),
                &[c],
                Init::Ones,
                rng,
                false,
            )?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let c = self.weight.dims()[0];
        let denom = (self.running_var.as_tensor() + self.eps)?.sqrt()?;
        let scale = self.weight.as_tensor().div(&denom)?;
        let shift = (self.bias.as_tensor() - self.running_mean.as_tensor().mul(&scale)?)?;
        x.broadcast_mul(&scale.reshape((1, c, 1, 1))?)?
            .broadcast_add(&shift.reshape((1, c, 1, 1))?)
    }
}

/// Fixed-kernel bilinear x2 upsampling, expressed as a per-channel
/// transposed convolution (kernel 4, stride 2, padding 1).
pub fn bilinear_upsample_x2(x: &Tensor) -> candle_core::Result<Tensor> {
    const W: [f32; 4] = [0.25, 0.75, 0.75, 0.25];
    let (b, c, h, w) = x.dims4()?;
    let mut kernel = [0f32; 16];
    for (i, wi) in W.iter().enumerate() {
        for (j, wj) in W.iter().enumerate() {
            kernel[i * 4 + j] = wi * wj;
        }
    }
    let k = Tensor::from_slice(&kernel, (1, 1, 4, 4), x.device())?;
    x.reshape((b * c, 1, h, w))?
        .conv_transpose2d(&k, 1, 0, 2, 1)?
        .reshape((b, c, 2 * h, 2 * w))
}
