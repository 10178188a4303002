//! Encoder-decoder network mapping a single-channel volume to a 3-channel displacement field.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamStore, Shape};
use crate::error::{Error, Result};
use crate::losses::LossVariant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub dims: [usize; 3],
    /// Resolution levels including the bottleneck.
    pub levels: usize,
    pub base_channels: usize,
    pub leaky_slope: f64,
    pub out_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { dims: [64, 64, 64], levels: 4, base_channels: 16, leaky_slope: 0.2, out_channels: 3 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidArgument("network needs at least one level".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::InvalidArgument("base_channels must be >= 1".into()));
        }
        if self.out_channels != 3 {
            return Err(Error::InvalidArgument(format!("out_channels must be 3, got {}", self.out_channels)));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::InvalidArgument("leaky_slope must be finite".into()));
        }
        let f = 1usize << (self.levels - 1);
        if self.dims.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::ShapeMismatch(format!(
                "input dims {:?} must be divisible by {f} for {} levels",
                self.dims, self.levels
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Parameter names and shapes in canonical order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize| {
            out.push((format!("{name}.w"), vec![cout, cin, 3, 3, 3]));
            out.push((format!("{name}.b"), vec![cout]));
        };
        let c0 = self.channels(0);
        conv("init".into(), 1, c0);
        let mut cin = c0;
        for l in 0..self.levels - 1 {
            let c = self.channels(l);
            conv(format!("enc{l}.conv0"), cin, c);
            conv(format!("enc{l}.conv1"), c, c);
            cin = c;
        }
        let cb = self.channels(self.levels - 1);
        conv("bottleneck.conv0".into(), cin, cb);
        conv("bottleneck.conv1".into(), cb, cb);
        let mut below = cb;
        for l in (0..self.levels - 1).rev() {
            let c = self.channels(l);
            conv(format!("dec{l}.conv0"), below + c, c);
            conv(format!("dec{l}.conv1"), c, c);
            below = c;
        }
        conv("final".into(), below, self.out_channels);
        out
    }
}

/// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases, zero final layer.
pub fn init_params(cfg: &UNetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in cfg.param_layout() {
        let n: usize = shape.iter().product();
        let values = if name.starts_with("final") || shape.len() == 1 {
            vec![0.0; n]
        } else {
            let fan_in = (shape[1] * 27) as f64;
            let b = (6.0 / fan_in).sqrt();
            let dist = Uniform::new(-b, b).expect("positive bound");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        store.add(&name, &shape, values)?;
    }
    Ok(store)
}

/// The network as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct UNet {
    pub input: NodeId,
    pub output: NodeId,
}

fn conv_block(g: &mut Graph, store: &ParamStore, x: NodeId, name: &str, slope: Option<f64>) -> Result<NodeId> {
    let lookup = |suffix: &str| {
        let full = format!("{name}.{suffix}");
        store.id(&full).ok_or_else(|| Error::ShapeMismatch(format!("missing parameter block {full:?}")))
    };
    let w = g.param(store, lookup("w")?)?;
    let b = g.param(store, lookup("b")?)?;
    let c = g.conv3d(x, w)?;
    let y = g.bias_add(c, b)?;
    match slope {
        Some(s) => g.leaky_relu(y, s),
        None => Ok(y),
    }
}

/// Adds the network to `g`. The input node is `[1, X, Y, Z]`; the output is `[3, X, Y, Z]`.
pub fn build_unet(g: &mut Graph, cfg: &UNetConfig, store: &ParamStore) -> Result<UNet> {
    cfg.validate()?;
    check_store(cfg, store)?;
    let s = Some(cfg.leaky_slope);
    let input = g.input(Shape::volume(1, cfg.dims), false);
    let mut x = conv_block(g, store, input, "init", s)?;
    let mut skips = Vec::new();
    for l in 0..cfg.levels - 1 {
        x = conv_block(g, store, x, &format!("enc{l}.conv0"), s)?;
        x = conv_block(g, store, x, &format!("enc{l}.conv1"), s)?;
        skips.push(x);
        x = g.max_pool2(x)?;
    }
    x = conv_block(g, store, x, "bottleneck.conv0", s)?;
    x = conv_block(g, store, x, "bottleneck.conv1", s)?;
    for l in (0..cfg.levels - 1).rev() {
        let up = g.upsample2(x)?;
        let cat = g.concat(up, skips[l])?;
        x = conv_block(g, store, cat, &format!("dec{l}.conv0"), s)?;
        x = conv_block(g, store, x, &format!("dec{l}.conv1"), s)?;
    }
    let output = conv_block(g, store, x, "final", None)?;
    Ok(UNet { input, output })
}

fn check_store(cfg: &UNetConfig, store: &ParamStore) -> Result<()> {
    let layout = cfg.param_layout();
    if layout.len() != store.len() {
        return Err(Error::ShapeMismatch(format!(
            "configuration expects {} parameter blocks, found {}",
            layout.len(),
            store.len()
        )));
    }
    for ((name, shape), block) in layout.iter().zip(store.blocks()) {
        if *name != block.name || *shape != block.shape {
            return Err(Error::ShapeMismatch(format!(
                "expected parameter {name:?} {shape:?}, found {:?} {:?}",
                block.name, block.shape
            )));
        }
    }
    Ok(())
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DLSC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epoch: usize,
    pub variant: Option<LossVariant>,
}

/// Network weights plus what is needed to rebuild and resume it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: UNetConfig,
    pub meta: TrainingMeta,
    pub params: ParamStore,
    /// Whether Adam moments are stored.
    pub with_optimizer: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: UNetConfig,
    meta: TrainingMeta,
    with_optimizer: bool,
    optimizer_step: u64,
}

impl Checkpoint {
    /// Fails with a shape mismatch unless the parameters fit `cfg`.
    pub fn ensure_compatible(&self, cfg: &UNetConfig) -> Result<()> {
        check_store(cfg, &self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).expect("vec write");
        let header = Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
            with_optimizer: self.with_optimizer,
            optimizer_step: self.params.step,
        };
        let json = serde_json::to_vec(&header)?;
        out.write_u32::<LittleEndian>(json.len() as u32).expect("vec write");
        out.extend_from_slice(&json);
        out.write_u32::<LittleEndian>(self.params.len() as u32).expect("vec write");
        for b in self.params.blocks() {
            out.write_u32::<LittleEndian>(b.name.len() as u32).expect("vec write");
            out.extend_from_slice(b.name.as_bytes());
            out.write_u32::<LittleEndian>(b.shape.len() as u32).expect("vec write");
            for &d in &b.shape {
                out.write_u32::<LittleEndian>(d as u32).expect("vec write");
            }
            let mut arrays = vec![&b.value];
            if self.with_optimizer {
                arrays.push(&b.m);
                arrays.push(&b.v);
            }
            for a in arrays {
                for &x in a {
                    out.write_f32::<LittleEndian>(x as f32).expect("vec write");
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |e: std::io::Error| Error::Corrupt(format!("checkpoint: {e}"));
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(corrupt)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { what: "checkpoint", expected: "DLSC" });
        }
        let version = r.read_u32::<LittleEndian>().map_err(corrupt)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion { what: "checkpoint", found: version });
        }
        let json_len = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
        if json_len > r.len() {
            return Err(Error::Corrupt(format!("checkpoint header claims {json_len} bytes, {} left", r.len())));
        }
        let header: Header = serde_json::from_slice(&r[..json_len])
            .map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
        r = &r[json_len..];
        let nblocks = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
        let mut params = ParamStore::new();
        for _ in 0..nblocks {
            let name_len = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
            if name_len > r.len() {
                return Err(Error::Corrupt("checkpoint block name runs past end of file".into()));
            }
            let name = std::str::from_utf8(&r[..name_len])
                .map_err(|_| Error::Corrupt("checkpoint block name is not UTF-8".into()))?
                .to_string();
            r = &r[name_len..];
            let rank = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
            if rank > 8 {
                return Err(Error::Corrupt(format!("checkpoint block {name:?} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u32::<LittleEndian>().map_err(corrupt)? as usize);
            }
            let n: usize = shape.iter().product();
            let arrays = if header.with_optimizer { 3 } else { 1 };
            if n.saturating_mul(4 * arrays) > r.len() {
                return Err(Error::Corrupt(format!("checkpoint block {name:?} is truncated")));
            }
            let read = |r: &mut &[u8]| -> Result<Vec<f64>> {
                (0..n).map(|_| r.read_f32::<LittleEndian>().map(f64::from).map_err(corrupt)).collect()
            };
            let value = read(&mut r)?;
            let id = params.add(&name, &shape, value).map_err(|e| Error::Corrupt(format!("checkpoint: {e}")))?;
            if header.with_optimizer {
                let m = read(&mut r)?;
                let v = read(&mut r)?;
                let b = params.block_mut(id);
                b.m = m;
                b.v = v;
            }
        }
        if !r.is_empty() {
            return Err(Error::Corrupt(format!("checkpoint has {} trailing bytes", r.len())));
        }
        params.step = header.optimizer_step;
        let ck = Checkpoint { config: header.config, meta: header.meta, params, with_optimizer: header.with_optimizer };
        ck.config.validate()?;
        ck.ensure_compatible(&ck.config)?;
        Ok(ck)
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = ck.to_bytes()?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny() -> UNetConfig {
        UNetConfig { dims: [8, 8, 8], levels: 4, base_channels: 2, leaky_slope: 0.2, out_channels: 3 }
    }

    #[test]
    fn output_is_three_channels_and_zero_at_init() {
        let cfg = UNetConfig { dims: [16, 8, 8], ..tiny() };
        let store = init_params(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let net = build_unet(&mut g, &cfg, &store).unwrap();
        assert_eq!(g.shape(net.output).0, vec![3, 16, 8, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f64> = (0..16 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
        g.set_input(net.input, &x).unwrap();
        g.forward(&store).unwrap();
        assert!(g.value(net.output).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_config_shapes() {
        let cfg = UNetConfig::default();
        cfg.validate().unwrap();
        let layout = cfg.param_layout();
        assert_eq!(layout.first().unwrap().1, vec![16, 1, 3, 3, 3]);
        assert_eq!(layout.last().unwrap().1, vec![3]);
        assert!(layout.iter().any(|(n, s)| n == "bottleneck.conv1.w" && s[0] == 128));
        assert!(layout.iter().any(|(n, s)| n == "dec0.conv0.w" && s[1] == 48));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(UNetConfig { dims: [12, 8, 8], ..tiny() }.validate().is_err());
        assert!(UNetConfig { base_channels: 0, ..tiny() }.validate().is_err());
        assert!(UNetConfig { out_channels: 2, ..tiny() }.validate().is_err());
        assert!(UNetConfig { levels: 2, dims: [6, 6, 6], ..tiny() }.validate().is_ok());
    }

    #[test]
    fn init_is_deterministic_with_zero_final_layer() {
        let a = init_params(&tiny(), 5).unwrap();
        let b = init_params(&tiny(), 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&tiny(), 6).unwrap());
        assert!(a.get("final.w").unwrap().value.iter().all(|&v| v == 0.0));
        assert!(a.get("final.b").unwrap().value.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_variance_matches_fan_in() {
        let cfg = UNetConfig { dims: [8, 8, 8], base_channels: 4, ..tiny() };
        for (name, shape) in cfg.param_layout() {
            if shape.len() != 5 || name.starts_with("final") {
                continue;
            }
            let mut values = Vec::new();
            for seed in 0..10 {
                values.extend_from_slice(&init_params(&cfg, seed).unwrap().get(&name).unwrap().value);
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let target = 2.0 / (shape[1] * 27) as f64;
            assert!((var / target - 1.0).abs() < 0.2, "{name}: {var} vs {target}");
        }
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        let cfg = tiny();
        let mut store = init_params(&cfg, 3).unwrap();
        // nonzero final layer so every block receives gradient
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for name in ["final.w", "final.b"] {
            let id = store.id(name).unwrap();
            store.block_mut(id).value.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
        let mut g = Graph::new();
        let net = build_unet(&mut g, &cfg, &store).unwrap();
        let x: Vec<f64> = (0..512).map(|_| rng.random_range(0.0..1.0)).collect();
        g.set_input(net.input, &x).unwrap();
        let r = g.constant(Shape::volume(3, cfg.dims), (0..1536).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let p = g.mul(net.output, r).unwrap();
        let loss = g.sum(p).unwrap();
        // ten randomly chosen parameters spread over the blocks
        let mut picks = Vec::new();
        for _ in 0..10 {
            picks.push(rng.random_range(0..store.len()));
        }
        g.forward(&store).unwrap();
        store.zero_grad();
        g.backward(loss, &mut store).unwrap();
        // a first-layer bias moves every activation at once; a short step keeps the probe off the kinks
        let h = 1e-6;
        let mut max_err = 0.0f64;
        let mut max_fd = 0.0f64;
        for &b in &picks {
            let e = rng.random_range(0..store.block(b).numel());
            let analytic = store.block(b).grad[e];
            let base = store.block(b).value[e];
            store.block_mut(b).value[e] = base + h;
            g.forward(&store).unwrap();
            let fp = g.scalar(loss);
            store.block_mut(b).value[e] = base - h;
            g.forward(&store).unwrap();
            let fm = g.scalar(loss);
            store.block_mut(b).value[e] = base;
            let fd = (fp - fm) / (2.0 * h);
            max_err = max_err.max((analytic - fd).abs());
            max_fd = max_fd.max(fd.abs());
        }
        assert!(max_err / max_fd < 1e-5, "rel error {}", max_err / max_fd);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let cfg = tiny();
        let mut params = init_params(&cfg, 2).unwrap();
        params.step = 17;
        for b in params.blocks_mut() {
            b.m.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 1e-3);
            b.v.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 1e-6);
        }
        for with_optimizer in [false, true] {
            let ck = Checkpoint {
                config: cfg.clone(),
                meta: TrainingMeta { seed: 9, epoch: 4, variant: Some(LossVariant::New) },
                params: params.clone(),
                with_optimizer,
            };
            let dir = tempfile::tempdir().unwrap();
            let p1 = dir.path().join("a.ckpt");
            let p2 = dir.path().join("b.ckpt");
            save_checkpoint(&p1, &ck).unwrap();
            let loaded = load_checkpoint(&p1).unwrap();
            save_checkpoint(&p2, &loaded).unwrap();
            assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
            assert_eq!(loaded.meta, ck.meta);
            assert_eq!(loaded.params.step, 17);
        }
    }

    #[test]
    fn checkpoint_errors_are_distinct() {
        let cfg = tiny();
        let ck = Checkpoint {
            config: cfg.clone(),
            meta: TrainingMeta::default(),
            params: init_params(&cfg, 0).unwrap(),
            with_optimizer: false,
        };
        let bytes = ck.to_bytes().unwrap();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Corrupt(_))), "cut {cut}");
        }
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::UnsupportedVersion { found: 9, .. })));
        let mut m = bytes.clone();
        m[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&m), Err(Error::BadMagic { .. })));
        let other = UNetConfig { base_channels: 3, ..cfg };
        assert!(matches!(ck.ensure_compatible(&other), Err(Error::ShapeMismatch(_))));
    }
}
