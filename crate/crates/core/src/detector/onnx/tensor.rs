use super::proto::{data_type, TensorProto};
use super::RuntimeError;

#[derive(Debug, Clone, PartialEq)]
enum Data {
    Float(Vec<f32>),
    Int(Vec<i64>),
}

/// Dense runtime value.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tensor {
    shape: Vec<usize>,
    data: Data,
}

impl Tensor {
    pub fn float(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, RuntimeError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(RuntimeError::new(format!(
                "shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Data::Float(data),
        })
    }

    pub fn int(shape: Vec<usize>, data: Vec<i64>) -> Result<Self, RuntimeError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(RuntimeError::new(format!(
                "shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Data::Int(data),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn floats(&self) -> Result<&[f32], RuntimeError> {
        match &self.data {
            Data::Float(v) => Ok(v),
            Data::Int(_) => Err(RuntimeError::new("expected a float tensor")),
        }
    }

    pub fn ints(&self) -> Result<&[i64], RuntimeError> {
        match &self.data {
            Data::Int(v) => Ok(v),
            Data::Float(_) => Err(RuntimeError::new("expected an integer tensor")),
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, RuntimeError> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(RuntimeError::new(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn from_proto(p: &TensorProto) -> Result<Self, RuntimeError> {
        let shape = p
            .dims
            .iter()
            .map(|&d| usize::try_from(d).map_err(|_| RuntimeError::new("negative dimension")))
            .collect::<Result<Vec<_>, _>>()?;
        let raw = &p.raw_data;
        match p.data_type {
            data_type::FLOAT => {
                let data = if raw.is_empty() {
                    p.float_data.clone()
                } else {
                    raw.chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect()
                };
                Self::float(shape, data)
            }
            data_type::DOUBLE => {
                let data = if raw.is_empty() {
                    p.double_data.iter().map(|&v| v as f32).collect()
                } else {
                    raw.chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")) as f32)
                        .collect()
                };
                Self::float(shape, data)
            }
            data_type::INT64 => {
                let data = if raw.is_empty() {
                    p.int64_data.clone()
                } else {
                    raw.chunks_exact(8)
                        .map(|b| i64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                        .collect()
                };
                Self::int(shape, data)
            }
            data_type::INT32 => {
                let data = if raw.is_empty() {
                    p.int32_data.iter().map(|&v| i64::from(v)).collect()
                } else {
                    raw.chunks_exact(4)
                        .map(|b| i64::from(i32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                        .collect()
                };
                Self::int(shape, data)
            }
            other => Err(RuntimeError::new(format!(
                "tensor `{}` has unsupported data type {other}",
                p.name
            ))),
        }
    }
}
