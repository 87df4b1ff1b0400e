//! JSON cannot carry NaN, and missing cells are NaN in memory. These helpers
//! encode NaN as `null`.

use ndarray::Array2;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub mod vec {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let opt: Vec<Option<f64>> = v.iter().map(|x| (!x.is_nan()).then_some(*x)).collect();
        opt.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let opt: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(opt.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
    }
}

pub mod array2 {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct Dense {
        rows: usize,
        cols: usize,
        #[serde(with = "super::vec")]
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        Dense { rows: m.nrows(), cols: m.ncols(), data: m.iter().copied().collect() }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let dense = Dense::deserialize(d)?;
        Array2::from_shape_vec((dense.rows, dense.cols), dense.data).map_err(serde::de::Error::custom)
    }
}
