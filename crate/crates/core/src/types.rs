//! Shared value types: token matrices, identifiers, storage dtypes and seeds.

use std::borrow::Borrow;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Token embeddings of one text: `rows` tokens of `dim` reals, row-major.
///
/// Every value is finite and the matrix holds at least one token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
}

impl TokenMatrix {
    pub fn new(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 {
            return Err(Error::InvalidMatrix(
                "matrix must have at least one row".into(),
            ));
        }
        if dim == 0 {
            return Err(Error::InvalidMatrix("dimension must be at least 1".into()));
        }
        if values.len() != rows * dim {
            return Err(Error::InvalidMatrix(format!(
                "expected {} values for {rows}x{dim}, got {}",
                rows * dim,
                values.len()
            )));
        }
        if let Some(position) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                value: values[position],
                position,
            });
        }
        Ok(Self { rows, dim, values })
    }

    /// Builds a matrix from a list of equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: row.len(),
                    context: Some(format!("row {i}")),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(rows.len(), dim, values)
    }

    /// A `rows x dim` matrix of zeros.
    pub fn zeros(rows: usize, dim: usize) -> Result<Self> {
        Self::new(rows, dim, vec![0.0; rows * dim])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.dim)
    }

    /// Multiplies every value by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.rows,
            self.dim,
            self.values.iter().map(|v| v * factor).collect(),
        )
    }

    /// Row-wise concatenation of `self` followed by `other`.
    pub fn concat(&self, other: &TokenMatrix) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: other.dim,
                context: Some("row concatenation".into()),
            });
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Self::new(self.rows + other.rows, self.dim, values)
    }

    /// Returns a matrix whose row `i` is row `order[i]` of `self`.
    pub fn select_rows(&self, order: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(order.len() * self.dim);
        for &i in order {
            if i >= self.rows {
                return Err(Error::InvalidMatrix(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            values.extend_from_slice(self.row(i));
        }
        Self::new(order.len(), self.dim, values)
    }
}

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Result<Self> {
                let id = id.into();
                if id.is_empty() || id.chars().any(char::is_whitespace) {
                    return Err(Error::InvalidId(id));
                }
                Ok(Self(id))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::new(s)
            }
        }

        impl Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }

        impl AsRef<str> for $name {
            fn as_ref(&self) -> &str {
                &self.0
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
                serializer.serialize_str(&self.0)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                Self::new(s).map_err(serde::de::Error::custom)
            }
        }
    };
}

string_id!(
    /// Document identifier. Ordered by UTF-8 byte order.
    DocId
);
string_id!(
    /// Query identifier. Ordered by UTF-8 byte order.
    QueryId
);

/// Element type used when storing token vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Dtype {
    Float32,
    #[default]
    Float16,
}

impl Dtype {
    /// Bytes per stored element.
    pub fn size(self) -> usize {
        match self {
            Dtype::Float32 => 4,
            Dtype::Float16 => 2,
        }
    }

    /// On-disk code: 0 = float32, 1 = float16.
    pub fn code(self) -> u8 {
        match self {
            Dtype::Float32 => 0,
            Dtype::Float16 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::Float32),
            1 => Ok(Dtype::Float16),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::Float32 => "fp32",
            Dtype::Float16 => "fp16",
        })
    }
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" | "float32" | "f32" => Ok(Dtype::Float32),
            "fp16" | "float16" | "f16" => Ok(Dtype::Float16),
            other => Err(Error::InvalidConfig(format!("unknown dtype {other:?}"))),
        }
    }
}

impl Serialize for Dtype {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

/// Seed for every pseudo-random stream in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Seed(pub u64);

impl From<u64> for Seed {
    fn from(v: u64) -> Self {
        Seed(v)
    }
}
