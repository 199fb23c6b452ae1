//! Parameter checkpoint file.
//!
//! ```text
//! MMGCKPT 1
//! meta <key> <value...>          (zero or more)
//! tensor <name> f64 <d0>x<d1>... (one per tensor; `-` for a 0-d shape)
//! end
//! <concatenated little-endian f64 blobs, in tensor order>
//! ```
//!
//! Names contain no whitespace. Values round-trip bit-exactly.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{Result, Tensor, TensorError};

const MAGIC: &str = "MMGCKPT 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(bad(format!("meta entry `{k}` not representable")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, t) in &self.tensors {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(bad(format!("tensor name `{name}` not representable")));
            }
            let shape = if t.shape().is_empty() {
                "-".to_string()
            } else {
                t.shape()
                    .iter()
                    .map(|d| d.to_string())
                    .collect::<Vec<_>>()
                    .join("x")
            };
            header.push_str(&format!("tensor {name} f64 {shape}\n"));
        }
        header.push_str("end\n");
        w.write_all(header.as_bytes())?;
        for (_, t) in &self.tensors {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(bad("missing magic line"));
        }
        let mut meta = Vec::new();
        let mut specs = Vec::new();
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("header not terminated"));
            }
            let l = line.trim_end_matches('\n');
            if l == "end" {
                break;
            }
            if let Some(rest) = l.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = l.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 || parts[1] != "f64" {
                    return Err(bad(format!("bad tensor line `{l}`")));
                }
                let shape: Vec<usize> = if parts[2] == "-" {
                    vec![]
                } else {
                    parts[2]
                        .split('x')
                        .map(|d| {
                            d.parse()
                                .map_err(|_| bad(format!("bad shape `{}`", parts[2])))
                        })
                        .collect::<Result<_>>()?
                };
                specs.push((parts[0].to_string(), shape));
            } else {
                return Err(bad(format!("unrecognized header line `{l}`")));
            }
        }
        let mut tensors = Vec::with_capacity(specs.len());
        for (name, shape) in specs {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)
                .map_err(|_| bad(format!("blob for `{name}` truncated")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes after last blob"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            rows in 0usize..4,
            cols in 1usize..5,
            bits in proptest::collection::vec(any::<u64>(), 20),
        ) {
            let data: Vec<f64> = bits.iter().take(rows * cols).map(|b| f64::from_bits(*b)).collect();
            let t = Tensor::matrix(rows, cols, data).unwrap();
            let ck = Checkpoint {
                meta: vec![("dim".into(), "3 4".into())],
                tensors: vec![("a.w".into(), t), ("s".into(), Tensor::scalar(-0.0))],
            };
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(&buf[..]).unwrap();
            prop_assert_eq!(back.meta, ck.meta.clone());
            for ((n1, t1), (n2, t2)) in back.tensors.iter().zip(&ck.tensors) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(t1.shape(), t2.shape());
                let b1: Vec<u64> = t1.data().iter().map(|x| x.to_bits()).collect();
                let b2: Vec<u64> = t2.data().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(b1, b2);
            }
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let ck = Checkpoint {
            meta: vec![],
            tensors: vec![("w".into(), Tensor::zeros(vec![2, 2]))],
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::read_from(&buf[..]).is_err());
    }
}
