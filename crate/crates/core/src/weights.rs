//! Named tensor container, per-mechanism weight manifests, seeded
//! initialization, and the `.edtw` binary format.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "EDTW"
//! version u32      1
//! count   u32      number of tensors
//! per tensor:
//!   name_len u16, name bytes (UTF-8),
//!   ndim u8, ndim x u32 extents,
//!   product(extents) x f32 raw data
//! ```

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AttentionConfig, Mechanism};
use crate::error::{Error, Result};
use crate::sampling::SeedStream;
use crate::tensor::{matmul, Tensor};

const MAGIC: [u8; 4] = *b"EDTW";
const VERSION: u32 = 1;

/// Where a store's values came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Seeded(u64),
    Loaded(PathBuf),
}

/// Ordered map from tensor name to tensor. Names are unique; mechanisms
/// validate their required names against a manifest before use.
#[derive(Debug, Clone)]
pub struct WeightStore {
    tensors: IndexMap<String, Tensor>,
    provenance: Provenance,
}

impl WeightStore {
    pub fn new(provenance: Provenance) -> Self {
        Self {
            tensors: IndexMap::new(),
            provenance,
        }
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateWeight(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[t.dims().len() as u8])?;
            for &d in t.dims() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, provenance: Provenance) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = read_u32(r, "version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch(version));
        }
        let count = read_u32(r, "tensor count")?;
        let mut store = WeightStore::new(provenance);
        for idx in 0..count {
            let name_len = read_u16(r, "name length")? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(r, &mut name_bytes, "tensor name")?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::Truncated(format!("tensor {idx}: name is not UTF-8")))?;
            let mut ndim = [0u8; 1];
            read_exact(r, &mut ndim, "ndim")?;
            let mut dims = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                dims.push(read_u32(r, "extent")? as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = vec![0.0f32; len];
            for v in &mut data {
                let mut buf = [0u8; 4];
                read_exact(r, &mut buf, "tensor data")?;
                *v = f32::from_le_bytes(buf);
            }
            store.insert(name, Tensor::new(dims, data)?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        self.write_to(&mut file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        Self::read_from(&mut file, Provenance::Loaded(path.to_path_buf()))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Truncated(format!("unexpected end of file reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl Read, what: &str) -> Result<u16> {
    let mut buf = [0u8; 2];
    read_exact(r, &mut buf, what)?;
    Ok(u16::from_le_bytes(buf))
}

/// A linear projection `x W + b` with `W: [in, out]`, `b: [out]`.
#[derive(Debug, Clone)]
pub struct LinearWeights {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearWeights {
    pub fn from_store(store: &WeightStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: store.get(&format!("{prefix}.weight"))?.clone(),
            bias: store.get(&format!("{prefix}.bias"))?.clone(),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = matmul(x, &self.weight)?;
        let (n, d) = (y.rows(), y.cols());
        let bias = self.bias.data();
        if bias.len() != d {
            return Err(Error::shape(
                "linear",
                format!("bias has {} entries, output dim is {d}", bias.len()),
            ));
        }
        let data = y.data_mut();
        for i in 0..n {
            for c in 0..d {
                data[i * d + c] += bias[c];
            }
        }
        Ok(y)
    }
}

/// How a manifest entry is initialized when generating seeded weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in ±1/sqrt(fan_in).
    FanIn(usize),
    Zero,
    One,
    /// Uniform averaging weight 1/(k*k) (key/value token compression).
    Average(usize),
}

/// One required tensor of a mechanism.
#[derive(Debug, Clone)]
pub struct TensorSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

fn spec(name: impl Into<String>, dims: Vec<usize>, init: Init) -> TensorSpec {
    TensorSpec {
        name: name.into(),
        dims,
        init,
    }
}

fn linear_specs(prefix: &str, din: usize, dout: usize) -> Vec<TensorSpec> {
    vec![
        spec(format!("{prefix}.weight"), vec![din, dout], Init::FanIn(din)),
        spec(format!("{prefix}.bias"), vec![dout], Init::Zero),
    ]
}

fn conv_fusion_specs(d: usize, d_mid: usize) -> Vec<TensorSpec> {
    vec![
        spec("conv_fusion.compress.kernel", vec![d_mid, d, 3, 3], Init::FanIn(d * 9)),
        spec("conv_fusion.compress.bias", vec![d_mid], Init::Zero),
        spec("conv_fusion.norm.scale", vec![d_mid], Init::One),
        spec("conv_fusion.norm.shift", vec![d_mid], Init::Zero),
        spec("conv_fusion.expand.kernel", vec![d, d_mid, 1, 1], Init::FanIn(d_mid)),
        spec("conv_fusion.expand.bias", vec![d], Init::Zero),
    ]
}

fn compressor_specs(d: usize) -> Vec<TensorSpec> {
    let mut v = linear_specs("compressor.proj", d, d);
    v.push(spec("compressor.dw.kernel", vec![d, 1, 3, 3], Init::FanIn(9)));
    v.push(spec("compressor.dw.bias", vec![d], Init::Zero));
    v
}

fn lf_map_specs(prefix: &str, d: usize, d_mid: usize) -> Vec<TensorSpec> {
    let mut v = linear_specs(&format!("{prefix}.down"), d, d_mid);
    v.push(spec(format!("{prefix}.norm.scale"), vec![d_mid], Init::One));
    v.push(spec(format!("{prefix}.norm.shift"), vec![d_mid], Init::Zero));
    v.extend(linear_specs(&format!("{prefix}.up"), d_mid, d));
    v
}

/// Required weight names and shapes for one mechanism configuration.
pub fn manifest(cfg: &AttentionConfig) -> Vec<TensorSpec> {
    let d = cfg.dim;
    let d_mid = cfg.mid_dim();
    let mut specs = Vec::new();
    match cfg.mechanism {
        Mechanism::Sdpa | Mechanism::Linear => {
            for p in ["attn.q_proj", "attn.k_proj", "attn.v_proj", "attn.out_proj"] {
                specs.extend(linear_specs(p, d, d));
            }
        }
        Mechanism::Sana => {
            specs.extend(linear_specs("q_map.proj", d, d));
            specs.extend(linear_specs("k_map.proj", d, d));
            specs.extend(linear_specs("attn.v_proj", d, d));
            specs.extend(linear_specs("attn.out_proj", d, d));
        }
        Mechanism::LinFusion => {
            specs.extend(lf_map_specs("q_map", d, d_mid));
            specs.extend(lf_map_specs("k_map", d, d_mid));
            specs.extend(linear_specs("attn.v_proj", d, d));
            specs.extend(linear_specs("attn.out_proj", d, d));
        }
        Mechanism::KvComp { factor } => {
            for p in ["attn.q_proj", "attn.k_proj", "attn.v_proj", "attn.out_proj"] {
                specs.extend(linear_specs(p, d, d));
            }
            specs.push(spec("kv_compress.kernel", vec![d, factor, factor], Init::Average(factor)));
            specs.push(spec("kv_compress.bias", vec![d], Init::Zero));
        }
        Mechanism::Edit => {
            specs.extend(conv_fusion_specs(d, d_mid));
            specs.extend(compressor_specs(d));
            specs.extend(linear_specs("attn.out_proj", d, d));
        }
        Mechanism::Joint | Mechanism::JointDecomposed => {
            for p in [
                "image.q_proj",
                "image.k_proj",
                "image.v_proj",
                "image.out_proj",
                "prompt.q_proj",
                "prompt.k_proj",
                "prompt.v_proj",
                "prompt.out_proj",
            ] {
                specs.extend(linear_specs(p, d, d));
            }
        }
        Mechanism::Hybrid | Mechanism::HybridExact => {
            specs.extend(conv_fusion_specs(d, d_mid));
            specs.extend(compressor_specs(d));
            for p in ["prompt.q_proj", "prompt.k_proj", "prompt.v_proj"] {
                specs.extend(linear_specs(p, d, d));
            }
            specs.extend(linear_specs("image.out_proj", d, d));
            specs.extend(linear_specs("prompt.out_proj", d, d));
        }
    }
    specs
}

fn init_tensor(rng: &mut ChaCha8Rng, s: &TensorSpec) -> Tensor {
    let len: usize = s.dims.iter().product();
    let data = match s.init {
        Init::FanIn(fan_in) => {
            let scale = 1.0 / (fan_in as f32).sqrt();
            (0..len).map(|_| rng.gen_range(-scale..=scale)).collect()
        }
        Init::Zero => vec![0.0; len],
        Init::One => vec![1.0; len],
        Init::Average(k) => vec![1.0 / (k * k) as f32; len],
    };
    Tensor::new(s.dims.clone(), data).expect("manifest dims consistent")
}

/// Deterministically generates every tensor the mechanism needs, in
/// manifest order, from one 64-bit seed.
pub fn generate(cfg: &AttentionConfig, seed: u64) -> Result<WeightStore> {
    let mut rng = SeedStream::new(seed).rng();
    let mut store = WeightStore::new(Provenance::Seeded(seed));
    for s in manifest(cfg) {
        store.insert(s.name.clone(), init_tensor(&mut rng, &s))?;
    }
    Ok(store)
}

/// Checks that every manifest entry is present with the right shape.
pub fn validate(store: &WeightStore, cfg: &AttentionConfig) -> Result<()> {
    for s in manifest(cfg) {
        let t = store.get(&s.name)?;
        if t.dims() != s.dims.as_slice() {
            return Err(Error::shape(
                "weights::validate",
                format!("`{}` has dims {:?}, manifest expects {:?}", s.name, t.dims(), s.dims),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::uniform_tensor;

    fn random_store(seed: u64, tensors: usize) -> WeightStore {
        let mut rng = SeedStream::new(seed).rng();
        let mut store = WeightStore::new(Provenance::Seeded(seed));
        for i in 0..tensors {
            let ndim = 1 + (i % 3);
            let dims: Vec<usize> = (0..ndim).map(|_| 1 + rng.gen_range(0..4)).collect();
            let t = uniform_tensor(&mut rng, &dims, -10.0, 10.0);
            store.insert(format!("tensor.{i}"), t).unwrap();
        }
        store
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        for seed in 0..20 {
            let store = random_store(seed, 1 + seed as usize % 7);
            let mut buf = Vec::new();
            store.write_to(&mut buf).unwrap();
            let back =
                WeightStore::read_from(&mut buf.as_slice(), Provenance::Seeded(seed)).unwrap();
            assert_eq!(back.len(), store.len());
            for ((n1, t1), (n2, t2)) in store.iter().zip(back.iter()) {
                assert_eq!(n1, n2);
                assert_eq!(t1.dims(), t2.dims());
                // Bit-exact, not approximately equal.
                let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
                let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(b1, b2);
            }
        }
    }

    #[test]
    fn corrupted_containers_yield_typed_errors() {
        let store = random_store(3, 4);
        let mut buf = Vec::new();
        store.write_to(&mut buf).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            WeightStore::read_from(&mut bad_magic.as_slice(), Provenance::Seeded(0)),
            Err(Error::BadMagic(_))
        ));

        let mut bad_version = buf.clone();
        bad_version[4] = 9;
        assert!(matches!(
            WeightStore::read_from(&mut bad_version.as_slice(), Provenance::Seeded(0)),
            Err(Error::VersionMismatch(9))
        ));

        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(
            WeightStore::read_from(&mut &truncated[..], Provenance::Seeded(0)),
            Err(Error::Truncated(_))
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = WeightStore::new(Provenance::Seeded(0));
        store.insert("a", Tensor::zeros(vec![1])).unwrap();
        assert!(matches!(
            store.insert("a", Tensor::zeros(vec![1])),
            Err(Error::DuplicateWeight(_))
        ));
    }

    #[test]
    fn generate_covers_manifest_for_every_mechanism() {
        for mech in [
            Mechanism::Sdpa,
            Mechanism::Linear,
            Mechanism::Sana,
            Mechanism::LinFusion,
            Mechanism::KvComp { factor: 2 },
            Mechanism::Edit,
            Mechanism::Joint,
            Mechanism::JointDecomposed,
            Mechanism::Hybrid,
            Mechanism::HybridExact,
        ] {
            let cfg = AttentionConfig::new(mech, 8, 2, 4, 4, 3).unwrap();
            let store = generate(&cfg, 42).unwrap();
            validate(&store, &cfg).unwrap();
        }
    }

    #[test]
    fn missing_weight_error_names_the_tensor() {
        let cfg = AttentionConfig::new(Mechanism::Edit, 8, 2, 4, 4, 0).unwrap();
        let store = WeightStore::new(Provenance::Seeded(1));
        match validate(&store, &cfg) {
            Err(Error::MissingWeight(name)) => assert_eq!(name, "conv_fusion.compress.kernel"),
            other => panic!("expected missing-weight error, got {other:?}"),
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = AttentionConfig::new(Mechanism::Hybrid, 8, 2, 4, 4, 3).unwrap();
        let a = generate(&cfg, 7).unwrap();
        let b = generate(&cfg, 7).unwrap();
        for ((_, t1), (_, t2)) in a.iter().zip(b.iter()) {
            assert_eq!(t1.data(), t2.data());
        }
    }
}
