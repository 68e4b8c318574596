//! Token projection heads.
//!
//! Two architectures map `d_in`-dimensional backbone token vectors to
//! `d_out`-dimensional late-interaction vectors:
//!
//! * `Linear`: `Y = X W + b`
//! * `Ffn2`:   `Y = SiLU(X W1 + b1) W2 + b2`, hidden width `intermediate_factor * d_in`
//!
//! Either kind may add a residual term to the final output: `X` itself when
//! `d_in == d_out`, otherwise `X R` with a learned bias-free adapter `R`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::types::{Seed, TokenMatrix};

/// Common output dimensions for projection heads.
pub const STANDARD_DIMS: [usize; 7] = [16, 24, 32, 48, 64, 96, 128];

pub const DEFAULT_INTERMEDIATE_FACTOR: usize = 4;

const MAGIC: &[u8; 4] = b"MVPH";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Linear,
    Ffn2,
}

impl HeadKind {
    pub fn code(self) -> u8 {
        match self {
            HeadKind::Linear => 0,
            HeadKind::Ffn2 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(HeadKind::Linear),
            1 => Ok(HeadKind::Ffn2),
            other => Err(Error::Format(format!("unknown head kind code {other}"))),
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(HeadKind::Linear),
            "ffn2" => Ok(HeadKind::Ffn2),
            other => Err(Error::InvalidConfig(format!("unknown head kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub kind: HeadKind,
    /// Hidden width multiplier for `Ffn2` (ignored by `Linear`).
    pub intermediate_factor: usize,
    pub residual: bool,
}

impl ProjectionConfig {
    pub fn linear(d_in: usize, d_out: usize) -> Self {
        Self {
            d_in,
            d_out,
            kind: HeadKind::Linear,
            intermediate_factor: DEFAULT_INTERMEDIATE_FACTOR,
            residual: false,
        }
    }

    pub fn ffn2(d_in: usize, d_out: usize, residual: bool) -> Self {
        Self {
            d_in,
            d_out,
            kind: HeadKind::Ffn2,
            intermediate_factor: DEFAULT_INTERMEDIATE_FACTOR,
            residual,
        }
    }

    pub fn hidden(&self) -> usize {
        self.intermediate_factor * self.d_in
    }

    /// Whether the residual path needs a learned adapter matrix.
    pub fn has_adapter(&self) -> bool {
        self.residual && self.d_in != self.d_out
    }

    pub fn validate(&self) -> Result<()> {
        let fits = |v: usize| (1..=u16::MAX as usize).contains(&v);
        if !fits(self.d_in) || !fits(self.d_out) {
            return Err(Error::InvalidConfig(format!(
                "d_in and d_out must be in 1..=65535 (got {} and {})",
                self.d_in, self.d_out
            )));
        }
        if self.kind == HeadKind::Ffn2 && !fits(self.intermediate_factor) {
            return Err(Error::InvalidConfig(
                "intermediate_factor must be in 1..=65535".into(),
            ));
        }
        Ok(())
    }

    /// Names and shapes of the parameter tensors, in storage order.
    fn layout(&self) -> Vec<(&'static str, usize, usize)> {
        let mut shapes = match self.kind {
            HeadKind::Linear => vec![("W", self.d_in, self.d_out), ("b", 1, self.d_out)],
            HeadKind::Ffn2 => vec![
                ("W1", self.d_in, self.hidden()),
                ("b1", 1, self.hidden()),
                ("W2", self.hidden(), self.d_out),
                ("b2", 1, self.d_out),
            ],
        };
        if self.has_adapter() {
            shapes.push(("R", self.d_in, self.d_out));
        }
        shapes
    }
}

/// A named dense parameter block, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(name: &'static str, rows: usize, cols: usize) -> Self {
        Self {
            name,
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn is_bias(&self) -> bool {
        self.name.starts_with('b')
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    config: ProjectionConfig,
    params: Vec<Tensor>,
}

/// Gradients of a head's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    /// Same names, shapes and order as the head's parameters.
    pub params: Vec<Tensor>,
    pub input: TokenMatrix,
}

impl HeadGradients {
    pub fn flat(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `a (n x k) * b (k x m)`, all row-major.
fn matmul(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += a_ip * bv;
            }
        }
    }
    out
}

/// `aᵀ b` for `a (n x k)`, `b (n x m)`; result `k x m`.
fn matmul_tn(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        for p in 0..k {
            let a_ip = a[i * k + p];
            for (o, &bv) in out[p * m..(p + 1) * m]
                .iter_mut()
                .zip(&b[i * m..(i + 1) * m])
            {
                *o += a_ip * bv;
            }
        }
    }
    out
}

/// `a bᵀ` for `a (n x m)`, `b (k x m)`; result `n x k`.
fn matmul_nt(a: &[f64], n: usize, m: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let ar = &a[i * m..(i + 1) * m];
        for p in 0..k {
            out[i * k + p] = ar
                .iter()
                .zip(&b[p * m..(p + 1) * m])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    out
}

fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn column_sums(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in x.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Builds a head with Xavier-uniform weights (`U(-a, a)`,
/// `a = sqrt(6 / (fan_in + fan_out))`) and zero biases.
pub fn init_head(config: ProjectionConfig, seed: Seed) -> Result<ProjectionHead> {
    config.validate()?;
    let mut rng = DetRng::new(seed);
    let params = config
        .layout()
        .into_iter()
        .map(|(name, rows, cols)| {
            let mut t = Tensor::zeros(name, rows, cols);
            if !t.is_bias() {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                for v in &mut t.data {
                    *v = rng.uniform_in(-a, a);
                }
            }
            t
        })
        .collect();
    Ok(ProjectionHead { config, params })
}

impl ProjectionHead {
    /// Builds a head from explicit tensors given in storage order.
    pub fn from_params(config: ProjectionConfig, data: Vec<Vec<f64>>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != data.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                data.len()
            )));
        }
        let mut params = Vec::with_capacity(layout.len());
        for ((name, rows, cols), values) in layout.into_iter().zip(data) {
            if values.len() != rows * cols {
                return Err(Error::InvalidConfig(format!(
                    "parameter {name} needs {} values, got {}",
                    rows * cols,
                    values.len()
                )));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "parameter {name} is not finite"
                )));
            }
            params.push(Tensor {
                name,
                rows,
                cols,
                data: values,
            });
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ProjectionConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|t| t.name == name)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|t| t.data.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in &mut self.params {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn get(&self, name: &str) -> &[f64] {
        &self.param(name).expect("layout guarantees tensor").data
    }

    fn check_input(&self, x: &TokenMatrix) -> Result<()> {
        if x.dim() != self.config.d_in {
            return Err(Error::DimMismatch {
                expected: self.config.d_in,
                found: x.dim(),
                context: Some("projection input".into()),
            });
        }
        Ok(())
    }

    fn residual_term(&self, x: &TokenMatrix) -> Option<Vec<f64>> {
        let c = &self.config;
        if !c.residual {
            None
        } else if c.has_adapter() {
            Some(matmul(x.values(), x.rows(), c.d_in, self.get("R"), c.d_out))
        } else {
            Some(x.values().to_vec())
        }
    }

    /// Projects every token row of `x`.
    pub fn forward(&self, x: &TokenMatrix) -> Result<TokenMatrix> {
        self.check_input(x)?;
        let c = &self.config;
        let n = x.rows();
        let mut y = match c.kind {
            HeadKind::Linear => {
                let mut y = matmul(x.values(), n, c.d_in, self.get("W"), c.d_out);
                add_bias(&mut y, self.get("b"));
                y
            }
            HeadKind::Ffn2 => {
                let mut z = matmul(x.values(), n, c.d_in, self.get("W1"), c.hidden());
                add_bias(&mut z, self.get("b1"));
                let h: Vec<f64> = z.into_iter().map(silu).collect();
                let mut y = matmul(&h, n, c.hidden(), self.get("W2"), c.d_out);
                add_bias(&mut y, self.get("b2"));
                y
            }
        };
        if let Some(r) = self.residual_term(x) {
            for (v, rv) in y.iter_mut().zip(r) {
                *v += rv;
            }
        }
        TokenMatrix::new(n, c.d_out, y)
    }

    /// Exact gradients of `Σ upstream ⊙ forward(x)`.
    pub fn backward(&self, x: &TokenMatrix, upstream: &TokenMatrix) -> Result<HeadGradients> {
        self.check_input(x)?;
        let c = &self.config;
        let n = x.rows();
        if upstream.rows() != n || upstream.dim() != c.d_out {
            return Err(Error::DimMismatch {
                expected: c.d_out,
                found: upstream.dim(),
                context: Some(format!(
                    "upstream gradient is {}x{}, forward output is {n}x{}",
                    upstream.rows(),
                    upstream.dim(),
                    c.d_out
                )),
            });
        }
        let g = upstream.values();
        let mut grads: Vec<Tensor> = Vec::with_capacity(self.params.len());
        let mut dx = match c.kind {
            HeadKind::Linear => {
                let dw = matmul_tn(x.values(), n, c.d_in, g, c.d_out);
                let db = column_sums(g, c.d_out);
                grads.push(Tensor {
                    name: "W",
                    rows: c.d_in,
                    cols: c.d_out,
                    data: dw,
                });
                grads.push(Tensor {
                    name: "b",
                    rows: 1,
                    cols: c.d_out,
                    data: db,
                });
                matmul_nt(g, n, c.d_out, self.get("W"), c.d_in)
            }
            HeadKind::Ffn2 => {
                let hidden = c.hidden();
                let mut z = matmul(x.values(), n, c.d_in, self.get("W1"), hidden);
                add_bias(&mut z, self.get("b1"));
                let h: Vec<f64> = z.iter().copied().map(silu).collect();
                let dw2 = matmul_tn(&h, n, hidden, g, c.d_out);
                let db2 = column_sums(g, c.d_out);
                let dh = matmul_nt(g, n, c.d_out, self.get("W2"), hidden);
                let dz: Vec<f64> = dh
                    .iter()
                    .zip(&z)
                    .map(|(d, zv)| d * silu_grad(*zv))
                    .collect();
                let dw1 = matmul_tn(x.values(), n, c.d_in, &dz, hidden);
                let db1 = column_sums(&dz, hidden);
                grads.push(Tensor {
                    name: "W1",
                    rows: c.d_in,
                    cols: hidden,
                    data: dw1,
                });
                grads.push(Tensor {
                    name: "b1",
                    rows: 1,
                    cols: hidden,
                    data: db1,
                });
                grads.push(Tensor {
                    name: "W2",
                    rows: hidden,
                    cols: c.d_out,
                    data: dw2,
                });
                grads.push(Tensor {
                    name: "b2",
                    rows: 1,
                    cols: c.d_out,
                    data: db2,
                });
                matmul_nt(&dz, n, hidden, self.get("W1"), c.d_in)
            }
        };
        if c.residual {
            if c.has_adapter() {
                let dr = matmul_tn(x.values(), n, c.d_in, g, c.d_out);
                grads.push(Tensor {
                    name: "R",
                    rows: c.d_in,
                    cols: c.d_out,
                    data: dr,
                });
                let via_adapter = matmul_nt(g, n, c.d_out, self.get("R"), c.d_in);
                for (v, a) in dx.iter_mut().zip(via_adapter) {
                    *v += a;
                }
            } else {
                for (v, a) in dx.iter_mut().zip(g) {
                    *v += a;
                }
            }
        }
        Ok(HeadGradients {
            params: grads,
            input: TokenMatrix::new(n, c.d_in, dx)?,
        })
    }

    /// Writes the head in the `MVPH` binary layout. Parameters are stored as
    /// little-endian `f32`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.config;
        w.write_all(MAGIC)?;
        w.write_all(&[c.kind.code()])?;
        for v in [c.d_in, c.d_out, c.intermediate_factor] {
            w.write_all(&(v as u16).to_le_bytes())?;
        }
        w.write_all(&[u8::from(c.residual)])?;
        for t in &self.params {
            for &v in &t.data {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        if r.read_exact(&mut magic).is_err() || &magic != MAGIC {
            return Err(Error::BadMagic { expected: "MVPH" });
        }
        let mut header = [0u8; 8];
        r.read_exact(&mut header)
            .map_err(|_| Error::Truncated("projection head header".into()))?;
        let kind = HeadKind::from_code(header[0])?;
        let u16_at = |i: usize| u16::from_le_bytes([header[i], header[i + 1]]) as usize;
        let residual = match header[7] {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("bad residual flag {other}"))),
        };
        let config = ProjectionConfig {
            d_in: u16_at(1),
            d_out: u16_at(3),
            kind,
            intermediate_factor: u16_at(5),
            residual,
        };
        config.validate()?;
        let mut data = Vec::new();
        for (name, rows, cols) in config.layout() {
            let mut buf = vec![0u8; rows * cols * 4];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Truncated(format!("parameter {name}")))?;
            data.push(
                buf.chunks_exact(4)
                    .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                    .collect(),
            );
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after projection head".into()));
        }
        Self::from_params(config, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
