use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fully connected network with `tanh` on hidden layers. The output layer is
/// linear unless `tanh_output` is set.
///
/// Parameters are stored flat, layer by layer, each layer as its row-major
/// `out x in` weight matrix followed by its bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
    pub tanh_output: bool,
}

/// Post-activation values of every layer, input included.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpCache {
    pub activations: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds the input at least")
    }
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl Mlp {
    pub fn zeros(sizes: &[usize], tanh_output: bool) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes must have at least two positive entries, got {sizes:?}"
            )));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
            tanh_output,
        })
    }

    /// Glorot-uniform weights scaled by `gain`, zero biases.
    pub fn init<R: Rng + ?Sized>(
        sizes: &[usize],
        tanh_output: bool,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut m = Self::zeros(sizes, tanh_output)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let (inp, out) = (w[0], w[1]);
            let a = gain * (6.0 / (inp + out) as f64).sqrt();
            for p in &mut m.params[off..off + inp * out] {
                *p = rng.random_range(-a..a);
            }
            off += inp * out + out;
        }
        Ok(m)
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().expect("validated non-empty")
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.activations.pop().expect("non-empty"))
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<MlpCache> {
        if x.len() != self.input_len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} inputs", self.input_len()),
                got: x.len().to_string(),
            });
        }
        let layers = self.sizes.len() - 1;
        let mut activations = Vec::with_capacity(layers + 1);
        activations.push(x.to_vec());
        let mut off = 0;
        for l in 0..layers {
            let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + inp * out];
            let b = &self.params[off + inp * out..off + inp * out + out];
            let h = &activations[l];
            let act = self.tanh_output || l + 1 < layers;
            let y: Vec<f64> = (0..out)
                .map(|o| {
                    let row = &w[o * inp..(o + 1) * inp];
                    let z = b[o] + row.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
                    if act {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            activations.push(y);
            off += inp * out + out;
        }
        Ok(MlpCache { activations })
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d output`
    /// and returns `d loss / d input`.
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut g = grad_out.to_vec();
        for l in (0..layers).rev() {
            let (inp, out) = (self.sizes[l], self.sizes[l + 1]);
            let act = self.tanh_output || l + 1 < layers;
            if act {
                for (gi, y) in g.iter_mut().zip(&cache.activations[l + 1]) {
                    *gi *= 1.0 - y * y;
                }
            }
            let off = offsets[l];
            let h = &cache.activations[l];
            let w = &self.params[off..off + inp * out];
            let mut gin = vec![0.0; inp];
            {
                let (gw, gb) = grad[off..off + inp * out + out].split_at_mut(inp * out);
                for o in 0..out {
                    let go = g[o];
                    if go == 0.0 {
                        continue;
                    }
                    gb[o] += go;
                    let row = &w[o * inp..(o + 1) * inp];
                    let grow = &mut gw[o * inp..(o + 1) * inp];
                    for i in 0..inp {
                        grow[i] += go * h[i];
                        gin[i] += go * row[i];
                    }
                }
            }
            g = gin;
        }
        g
    }

    /// Upper bound on the Lipschitz constant: the product of the layer
    /// Frobenius norms, since `tanh` is 1-Lipschitz.
    pub fn lipschitz_bound(&self) -> f64 {
        let mut off = 0;
        let mut bound = 1.0;
        for w in self.sizes.windows(2) {
            let n = w[0] * w[1];
            bound *= self.params[off..off + n]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            off += n + w[1];
        }
        bound
    }
}

/// Output of one forward pass through the actor-critic network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetOutput {
    pub logits: Vec<f64>,
    pub value: f64,
    pub valid_logits: Vec<f64>,
}

/// Everything a backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct NetCache {
    pub torso: MlpCache,
    pub output: NetOutput,
}

/// Shared `tanh` torso feeding a policy head, a value head and a valid-mask
/// head. Flat parameter order: torso, policy, value, valid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActorCriticNet {
    pub torso: Mlp,
    pub policy: Mlp,
    pub value: Mlp,
    pub valid: Mlp,
}

const NET_MAGIC: &[u8; 4] = b"IPPN";
const NET_VERSION: u32 = 1;

impl ActorCriticNet {
    pub fn init<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        actions: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden.is_empty() || actions == 0 {
            return Err(Error::InvalidArgument(
                "network needs at least one hidden layer and one action".into(),
            ));
        }
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        let h = *hidden.last().expect("non-empty");
        Ok(Self {
            torso: Mlp::init(&sizes, true, 1.0, rng)?,
            policy: Mlp::init(&[h, actions], false, 0.01, rng)?,
            value: Mlp::init(&[h, 1], false, 1.0, rng)?,
            valid: Mlp::init(&[h, actions], false, 0.1, rng)?,
        })
    }

    pub fn zeros(input: usize, hidden: &[usize], actions: usize) -> Result<Self> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        let h = *hidden.last().ok_or_else(|| {
            Error::InvalidArgument("network needs at least one hidden layer".into())
        })?;
        Ok(Self {
            torso: Mlp::zeros(&sizes, true)?,
            policy: Mlp::zeros(&[h, actions], false)?,
            value: Mlp::zeros(&[h, 1], false)?,
            valid: Mlp::zeros(&[h, actions], false)?,
        })
    }

    pub fn input_len(&self) -> usize {
        self.torso.input_len()
    }

    pub fn action_count(&self) -> usize {
        self.policy.output_len()
    }

    pub fn param_count(&self) -> usize {
        self.torso.params.len()
            + self.policy.params.len()
            + self.value.params.len()
            + self.valid.params.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        for m in self.parts() {
            v.extend_from_slice(&m.params);
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} parameters", self.param_count()),
                got: flat.len().to_string(),
            });
        }
        let mut off = 0;
        for m in self.parts_mut() {
            let n = m.params.len();
            m.params.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Offsets of the four parameter blocks in the flat layout.
    pub fn block_offsets(&self) -> [usize; 5] {
        let a = self.torso.params.len();
        let b = a + self.policy.params.len();
        let c = b + self.value.params.len();
        let d = c + self.valid.params.len();
        [0, a, b, c, d]
    }

    fn parts(&self) -> [&Mlp; 4] {
        [&self.torso, &self.policy, &self.value, &self.valid]
    }

    fn parts_mut(&mut self) -> [&mut Mlp; 4] {
        [
            &mut self.torso,
            &mut self.policy,
            &mut self.value,
            &mut self.valid,
        ]
    }

    pub fn forward(&self, features: &[f64]) -> Result<NetOutput> {
        Ok(self.forward_cached(features)?.output)
    }

    pub fn forward_cached(&self, features: &[f64]) -> Result<NetCache> {
        let torso = self.torso.forward_cached(features)?;
        let h = torso.output();
        let output = NetOutput {
            logits: self.policy.forward(h)?,
            value: self.value.forward(h)?[0],
            valid_logits: self.valid.forward(h)?,
        };
        Ok(NetCache { torso, output })
    }

    /// Accumulates parameter gradients into the flat `grad` given output
    /// gradients for one sample.
    pub fn backward(
        &self,
        cache: &NetCache,
        d_logits: &[f64],
        d_value: f64,
        d_valid: &[f64],
        grad: &mut [f64],
    ) {
        let [_, p0, v0, q0, end] = self.block_offsets();
        let head_in = MlpCache {
            activations: vec![
                cache.torso.output().to_vec(),
                cache.output.logits.clone(),
            ],
        };
        let (g_torso, rest) = grad.split_at_mut(p0);
        let (g_pol, rest) = rest.split_at_mut(v0 - p0);
        let (g_val, g_valid) = rest.split_at_mut(q0 - v0);
        debug_assert_eq!(g_valid.len(), end - q0);

        let mut dh = self.policy.backward(&head_in, d_logits, g_pol);
        let val_cache = MlpCache {
            activations: vec![head_in.activations[0].clone(), vec![cache.output.value]],
        };
        for (a, b) in dh
            .iter_mut()
            .zip(self.value.backward(&val_cache, &[d_value], g_val))
        {
            *a += b;
        }
        let valid_cache = MlpCache {
            activations: vec![
                head_in.activations[0].clone(),
                cache.output.valid_logits.clone(),
            ],
        };
        for (a, b) in dh
            .iter_mut()
            .zip(self.valid.backward(&valid_cache, d_valid, g_valid))
        {
            *a += b;
        }
        self.torso.backward(&cache.torso, &dh, g_torso);
    }

    /// Checkpoint: magic, version, layer shapes, then little-endian f64
    /// parameters in flat order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(NET_MAGIC)?;
        w.write_all(&NET_VERSION.to_le_bytes())?;
        w.write_all(&(self.torso.sizes.len() as u32).to_le_bytes())?;
        for &s in &self.torso.sizes {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        w.write_all(&(self.action_count() as u32).to_le_bytes())?;
        for v in self.flat() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != NET_MAGIC {
            return Err(Error::Format("not a network checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != NET_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let n = read_u32(&mut r)? as usize;
        if !(2..=16).contains(&n) {
            return Err(Error::Format(format!("bad torso depth {n}")));
        }
        let sizes = (0..n)
            .map(|_| read_u32(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let actions = read_u32(&mut r)? as usize;
        let mut net = Self::zeros(sizes[0], &sizes[1..], actions)
            .map_err(|e| Error::Format(e.to_string()))?;
        let mut flat = vec![0.0; net.param_count()];
        let mut buf = [0u8; 8];
        for v in &mut flat {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        net.set_flat(&flat)?;
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        Ok(net)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
