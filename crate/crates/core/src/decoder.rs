//! Residual decoder: a small MLP mapping an interpolated feature to a colour
//! and a residual SDF, with a hand-written reverse pass.
//!
//! Trunk: `D -> H -> H` with ReLU. Heads: colour (3, sigmoid) and residual SDF
//! (1, linear). Samples are processed in column batches so the heavy lifting
//! is three GEMMs forward and at most six backward.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::svo::MapError;

const DECODER_MAGIC: &[u8; 8] = b"HVSLADEC";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub hidden: usize,
    /// Half-width of the uniform init of the colour head.
    pub color_init: f64,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { hidden: 32, color_init: 1e-2, seed: 1 }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Decoder weights. Matrices map column inputs to column outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub wc: DMatrix<f64>,
    pub bc: DVector<f64>,
    pub ws: DMatrix<f64>,
    pub bs: DVector<f64>,
}

impl DecoderParams {
    /// He-uniform trunk, small random colour head, all-zero SDF head (so the
    /// residual vanishes until training moves it).
    pub fn new(feature_dim: usize, cfg: &DecoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let h = cfg.hidden;
        let mut uniform = |rows: usize, cols: usize, bound: f64| {
            DMatrix::from_fn(rows, cols, |_, _| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })
        };
        let w1 = uniform(h, feature_dim, (6.0 / feature_dim as f64).sqrt());
        let w2 = uniform(h, h, (6.0 / h as f64).sqrt());
        let wc = uniform(3, h, cfg.color_init);
        Self {
            w1,
            b1: DVector::zeros(h),
            w2,
            b2: DVector::zeros(h),
            wc,
            bc: DVector::zeros(3),
            ws: DMatrix::zeros(1, h),
            bs: DVector::zeros(1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: DMatrix::zeros(self.w1.nrows(), self.w1.ncols()),
            b1: DVector::zeros(self.b1.len()),
            w2: DMatrix::zeros(self.w2.nrows(), self.w2.ncols()),
            b2: DVector::zeros(self.b2.len()),
            wc: DMatrix::zeros(self.wc.nrows(), self.wc.ncols()),
            bc: DVector::zeros(self.bc.len()),
            ws: DMatrix::zeros(self.ws.nrows(), self.ws.ncols()),
            bs: DVector::zeros(self.bs.len()),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn slices(&self) -> [&[f64]; 8] {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.wc.as_slice(),
            self.bc.as_slice(),
            self.ws.as_slice(),
            self.bs.as_slice(),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
            self.wc.as_mut_slice(),
            self.bc.as_mut_slice(),
            self.ws.as_mut_slice(),
            self.bs.as_mut_slice(),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    /// Flat parameter accessor (ordering as `to_flat`).
    pub fn get(&self, mut i: usize) -> f64 {
        for s in self.slices() {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, mut i: usize, value: f64) {
        for s in self.slices_mut() {
            if i < s.len() {
                s[i] = value;
                return;
            }
            i -= s.len();
        }
        panic!("parameter index out of range")
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Decodes one feature into `(colour, residual sdf)`.
    pub fn decode(&self, feature: &[f64]) -> ([f64; 3], f64) {
        let x = DMatrix::from_column_slice(feature.len(), 1, feature);
        let out = self.forward(&x);
        ([out.color[(0, 0)], out.color[(1, 0)], out.color[(2, 0)]], out.sdf[(0, 0)])
    }

    /// Forward pass over a `D x N` batch of features.
    pub fn forward(&self, x: &DMatrix<f64>) -> DecoderOutput {
        let n = x.ncols();
        let mut z1 = &self.w1 * x;
        add_bias(&mut z1, &self.b1);
        z1.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        let a1 = z1;
        let mut z2 = &self.w2 * &a1;
        add_bias(&mut z2, &self.b2);
        z2.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        let a2 = z2;
        let mut oc = &self.wc * &a2;
        add_bias(&mut oc, &self.bc);
        oc.as_mut_slice().iter_mut().for_each(|v| *v = sigmoid(*v));
        let color = oc;
        let mut sdf = &self.ws * &a2;
        add_bias(&mut sdf, &self.bs);
        debug_assert_eq!(sdf.ncols(), n);
        DecoderOutput { a1, a2, color, sdf }
    }

    /// Reverse pass. `d_color` is `3 x N`, `d_sdf` is `1 x N`. Returns the
    /// parameter gradients (when requested) and the `D x N` input gradients.
    pub fn backward(
        &self,
        x: &DMatrix<f64>,
        out: &DecoderOutput,
        d_color: &DMatrix<f64>,
        d_sdf: &DMatrix<f64>,
        want_params: bool,
    ) -> (Option<DecoderParams>, DMatrix<f64>) {
        let mut doc = d_color.clone();
        for (g, c) in doc.as_mut_slice().iter_mut().zip(out.color.as_slice()) {
            *g *= c * (1.0 - c);
        }
        let mut dz2 = self.wc.transpose() * &doc + self.ws.transpose() * d_sdf;
        relu_mask(&mut dz2, &out.a2);
        let mut dz1 = self.w2.transpose() * &dz2;
        relu_mask(&mut dz1, &out.a1);
        let dx = self.w1.transpose() * &dz1;
        let grads = want_params.then(|| DecoderParams {
            w1: &dz1 * x.transpose(),
            b1: row_sums(&dz1),
            w2: &dz2 * out.a1.transpose(),
            b2: row_sums(&dz2),
            wc: &doc * out.a2.transpose(),
            bc: row_sums(&doc),
            ws: d_sdf * out.a2.transpose(),
            bs: row_sums(d_sdf),
        });
        (grads, dx)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<(), MapError> {
        w.write_all(DECODER_MAGIC)?;
        w.write_u32::<LittleEndian>(self.feature_dim() as u32)?;
        w.write_u32::<LittleEndian>(self.hidden() as u32)?;
        for s in self.slices() {
            for &v in s {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, MapError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DECODER_MAGIC {
            return Err(MapError::Snapshot("bad decoder magic".into()));
        }
        let d = r.read_u32::<LittleEndian>()? as usize;
        let h = r.read_u32::<LittleEndian>()? as usize;
        if d == 0 || h == 0 || d > 4096 || h > 4096 {
            return Err(MapError::Snapshot("invalid decoder shape".into()));
        }
        let mut p = DecoderParams::new(d, &DecoderConfig { hidden: h, color_init: 0.0, seed: 0 });
        for s in p.slices_mut() {
            r.read_f64_into::<LittleEndian>(s)?;
        }
        Ok(p)
    }
}

/// Cached activations of a forward pass.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    /// `3 x N`, in `[0, 1]`.
    pub color: DMatrix<f64>,
    /// `1 x N` residual SDF.
    pub sdf: DMatrix<f64>,
}

fn add_bias(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    let r = m.nrows();
    for col in m.as_mut_slice().chunks_exact_mut(r) {
        for (v, bi) in col.iter_mut().zip(b.iter()) {
            *v += bi;
        }
    }
}

fn row_sums(m: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(m.nrows());
    let r = m.nrows();
    for col in m.as_slice().chunks_exact(r) {
        for (o, v) in out.iter_mut().zip(col) {
            *o += v;
        }
    }
    out
}

/// Zeroes gradients where the rectifier was inactive.
fn relu_mask(g: &mut DMatrix<f64>, a: &DMatrix<f64>) {
    for (gi, &ai) in g.as_mut_slice().iter_mut().zip(a.as_slice()) {
        if ai <= 0.0 {
            *gi = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_params(seed: u64, d: usize, h: usize) -> DecoderParams {
        let mut p = DecoderParams::new(d, &DecoderConfig { hidden: h, color_init: 0.5, seed });
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for s in p.slices_mut() {
            for v in s.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        p
    }

    #[test]
    fn zero_network_outputs() {
        let mut p = DecoderParams::new(4, &DecoderConfig::default());
        for s in p.slices_mut() {
            s.fill(0.0);
        }
        let (c, s) = p.decode(&[0.3, -0.1, 0.2, 0.9]);
        assert_eq!(c, [0.5; 3]);
        assert_eq!(s, 0.0);
        p.bs[0] = 0.37;
        let (_, s) = p.decode(&[0.0; 4]);
        assert_eq!(s, 0.37);
    }

    #[test]
    fn fresh_decoder_has_zero_residual() {
        let p = DecoderParams::new(16, &DecoderConfig::default());
        let (_, s) = p.decode(&[0.01; 16]);
        assert_eq!(s, 0.0);
    }

    #[test]
    fn random_outputs_are_finite_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..20 {
            let p = random_params(seed, 8, 16);
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(-5.0..5.0)).collect();
            let (c, s) = p.decode(&x);
            assert!(s.is_finite());
            assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(p.decode(&x), (c, s));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = random_params(1, 4, 8);
        let x = DMatrix::from_element(4, 3, 0.2);
        let out = p.forward(&x);
        let (g, dx) = p.backward(&x, &out, &DMatrix::zeros(3, 3), &DMatrix::zeros(1, 3), true);
        assert!(g.unwrap().to_flat().iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    /// Scalar probe `L = a . colour + b * sdf` summed over the batch.
    fn probe(p: &DecoderParams, x: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let out = p.forward(x);
        out.color.component_mul(a).sum() + out.sdf.component_mul(b).sum()
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(3, 6, 10);
        let x = DMatrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let a = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(1, 4, |_, _| rng.random_range(-1.0..1.0));
        let out = p.forward(&x);
        let (g, dx) = p.backward(&x, &out, &a, &b, true);
        let g = g.unwrap();
        let h = 1e-5;
        for _ in 0..20 {
            let i = rng.random_range(0..p.num_params());
            let mut pp = p.clone();
            pp.set(i, p.get(i) + h);
            let fp = probe(&pp, &x, &a, &b);
            pp.set(i, p.get(i) - h);
            let fm = probe(&pp, &x, &a, &b);
            let fd = (fp - fm) / (2.0 * h);
            let an = g.get(i);
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "param {i}: {fd} vs {an}");
        }
        for i in 0..6 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[(i, j)] += h;
                let fp = probe(&p, &xp, &a, &b);
                xp[(i, j)] -= 2.0 * h;
                let fm = probe(&p, &xp, &a, &b);
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - dx[(i, j)]).abs() <= 1e-6 * dx[(i, j)].abs().max(1e-3));
            }
        }
    }

    #[test]
    fn params_round_trip() {
        let p = random_params(5, 4, 8);
        let mut buf = Vec::new();
        p.write(&mut buf).unwrap();
        assert_eq!(DecoderParams::read(&mut buf.as_slice()).unwrap(), p);
    }
}
