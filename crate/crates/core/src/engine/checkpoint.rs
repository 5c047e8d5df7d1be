//! Text checkpoint format.
//!
//! ```text
//! DAPNET-CHECKPOINT 1
//! header <line count>
//! <free-form header lines>
//! tensor <name> <rank> <extent>...
//! <row-major values, space separated>
//! ...
//! end
//! ```
//!
//! Values use the shortest decimal representation that parses back to the
//! identical `f64`, so save followed by load is bit-exact. Names must not
//! contain whitespace.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "DAPNET-CHECKPOINT 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{MAGIC}")?;
        let lines: Vec<&str> = if self.header.is_empty() {
            Vec::new()
        } else {
            self.header.lines().collect()
        };
        writeln!(w, "header {}", lines.len())?;
        for line in lines {
            writeln!(w, "{line}")?;
        }
        for (name, t) in &self.tensors {
            if name.is_empty() || name.chars().any(char::is_whitespace) {
                return Err(Error::Checkpoint(format!("invalid tensor name `{name}`")));
            }
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(w, "tensor {name} {} {}", t.rank(), dims.join(" "))?;
            let values: Vec<String> = t.data().iter().map(f64::to_string).collect();
            writeln!(w, "{}", values.join(" "))?;
        }
        writeln!(w, "end")?;
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::Checkpoint(format!("unexpected end of file, expected {what}")))
        };
        if next("magic")?.trim_end() != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let header_line = next("header")?;
        let count: usize = header_line
            .strip_prefix("header ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("bad header line `{header_line}`")))?;
        let mut header = Vec::with_capacity(count);
        for _ in 0..count {
            header.push(next("header text")?);
        }
        let mut tensors = Vec::new();
        loop {
            let line = next("tensor or end")?;
            if line.trim() == "end" {
                break;
            }
            let mut fields = line.split_whitespace();
            if fields.next() != Some("tensor") {
                return Err(Error::Checkpoint(format!("expected tensor record, got `{line}`")));
            }
            let name = fields
                .next()
                .ok_or_else(|| Error::Checkpoint("tensor record without name".into()))?
                .to_string();
            let bad = |what: &str| Error::Checkpoint(format!("tensor `{name}`: bad {what}"));
            let rank: usize = fields.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("rank"))?;
            let shape: Vec<usize> = fields
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("shape"))?;
            if shape.len() != rank {
                return Err(bad("rank"));
            }
            let values: Vec<f64> = next("tensor values")?
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("value"))?;
            let tensor = Tensor::new(shape, values).map_err(|_| bad("value count"))?;
            tensors.push((name, tensor));
        }
        let mut header = header.join("\n");
        if count > 0 {
            header.push('\n');
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = fs::File::open(path)?;
        Self::read_from(BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO | prop::num::f64::INFINITE, 1..40)) {
            let n = values.len();
            let ckpt = Checkpoint {
                header: "a = 1\nb = \"x y\"\n".into(),
                tensors: vec![("w".into(), Tensor::new(vec![n], values.clone()).unwrap())],
            };
            let mut buf = Vec::new();
            ckpt.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(&buf[..]).unwrap();
            prop_assert_eq!(&back.header, &ckpt.header);
            let got = back.get("w").unwrap().data();
            for (a, b) in got.iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rejects_truncated_input() {
        let text = "DAPNET-CHECKPOINT 1\nheader 0\ntensor w 2 2 2\n1 2 3\nend\n";
        assert!(Checkpoint::read_from(text.as_bytes()).is_err());
        assert!(Checkpoint::read_from("garbage\n".as_bytes()).is_err());
    }
}
