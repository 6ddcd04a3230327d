//! Model checkpoint files.
//!
//! Layout: one ASCII header line terminated by `\n`,
//!
//! ```text
//! horkd-mlp v1 input=16x16x1 hidden=256,64 embedding=32 classes=10 seed=7 frozen=1 values=NNN
//! ```
//!
//! followed by exactly `values` little-endian IEEE-754 `f64` numbers: every
//! parameter tensor in storage order (layer weight `[in×out]` row-major, then
//! layer bias), input layer first.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::mlp::{Model, ModelSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &str = "horkd-mlp";
const VERSION: &str = "v1";

fn header(spec: &ModelSpec, frozen: bool, values: usize) -> String {
    let (h, w, c) = spec.input_dims;
    let hidden: Vec<String> = spec.hidden_layers.iter().map(usize::to_string).collect();
    format!(
        "{MAGIC} {VERSION} input={h}x{w}x{c} hidden={} embedding={} classes={} seed={} frozen={} values={values}\n",
        hidden.join(","),
        spec.embedding_dim,
        spec.num_classes,
        spec.seed,
        u8::from(frozen),
    )
}

pub fn encode<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let values = model.num_parameters();
    let mut out = header(model.spec(), model.is_frozen(), values).into_bytes();
    out.reserve(values * 8);
    for p in model.params() {
        for &v in p.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Model<T>> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let line = std::str::from_utf8(&bytes[..newline]).map_err(|_| bad("header is not UTF-8".into()))?;
    let mut fields = line.split(' ');
    if fields.next() != Some(MAGIC) || fields.next() != Some(VERSION) {
        return Err(bad(format!("unrecognized header {line:?}")));
    }
    let mut kv = std::collections::HashMap::new();
    for f in fields {
        let (k, v) = f.split_once('=').ok_or_else(|| bad(format!("malformed field {f:?}")))?;
        kv.insert(k, v);
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("missing field {k}")));
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number {s:?}")));

    let dims: Vec<usize> = get("input")?.split('x').map(num).collect::<Result<_>>()?;
    let [h, w, c] = dims[..] else {
        return Err(bad("input must be HxWxC".into()));
    };
    let hidden = get("hidden")?;
    let hidden_layers = if hidden.is_empty() {
        Vec::new()
    } else {
        hidden.split(',').map(num).collect::<Result<_>>()?
    };
    let spec = ModelSpec {
        input_dims: (h, w, c),
        hidden_layers,
        embedding_dim: num(get("embedding")?)?,
        num_classes: num(get("classes")?)?,
        seed: get("seed")?.parse().map_err(|_| bad("bad seed".into()))?,
    };
    let frozen = get("frozen")? == "1";
    let values = num(get("values")?)?;

    let body = &bytes[newline + 1..];
    if body.len() != values * 8 {
        return Err(bad(format!(
            "header promises {values} values but body holds {} bytes",
            body.len()
        )));
    }
    let mut floats = body
        .chunks_exact(8)
        .map(|b| T::of(f64::from_le_bytes(b.try_into().expect("chunk of 8"))));
    let mut params = Vec::new();
    for shape in spec.param_shapes() {
        let n = shape.iter().product();
        let data: Vec<T> = floats.by_ref().take(n).collect();
        if data.len() != n {
            return Err(bad("parameter count does not match the architecture".into()));
        }
        params.push(Tensor::new(shape, data)?);
    }
    if floats.next().is_some() {
        return Err(bad("parameter count does not match the architecture".into()));
    }
    Model::from_params(spec, params, frozen)
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(model))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    decode(&fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model<f64> {
        Model::build(ModelSpec {
            input_dims: (4, 4, 1),
            hidden_layers: vec![6, 5],
            embedding_dim: 3,
            num_classes: 2,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model().frozen();
        let bytes = encode(&m);
        let back: Model<f64> = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn header_is_plain_text() {
        let bytes = encode(&model());
        let line = bytes.split(|&b| b == b'\n').next().unwrap();
        assert_eq!(
            std::str::from_utf8(line).unwrap(),
            "horkd-mlp v1 input=4x4x1 hidden=6,5 embedding=3 classes=2 seed=11 frozen=0 values=163"
        );
    }

    #[test]
    fn truncated_body_rejected() {
        let bytes = encode(&model());
        let err = decode::<f64>(&bytes[..bytes.len() - 3], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }
}
