//! Text parameter file. Values are stored as IEEE-754 bit patterns in hex so
//! that `load(save(x))` is bit-exact.
//!
//! ```text
//! wbcdet-params 1
//! meta stage stage4
//! param backbone.0.weight 0 8,3,3,3
//! 3fb999999999999a bfd0000000000000 ...
//! end
//! ```

use std::io::{BufRead, Write};

use super::{Parameter, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "wbcdet-params 1";
const VALUES_PER_LINE: usize = 8;

/// Named parameters plus free-form `key value` metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamFile {
    pub meta: Vec<(String, String)>,
    pub params: Vec<Parameter>,
}

impl ParamFile {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let io = |e| Error::io("writing parameter file", e);
        writeln!(w, "{MAGIC}").map_err(io)?;
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("invalid meta entry {k:?}")));
            }
            writeln!(w, "meta {k} {v}").map_err(io)?;
        }
        for p in &self.params {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            writeln!(w, "param {} {} {}", p.name, u8::from(p.frozen), dims.join(",")).map_err(io)?;
            for chunk in p.value.data().chunks(VALUES_PER_LINE) {
                let line: Vec<String> = chunk.iter().map(|v| format!("{:016x}", v.to_bits())).collect();
                writeln!(w, "{}", line.join(" ")).map_err(io)?;
            }
        }
        writeln!(w, "end").map_err(io)?;
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(String::from_utf8(buf).expect("ascii output"))
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let mut next = || -> Result<Option<(usize, String)>> {
            match lines.next() {
                None => Ok(None),
                Some((i, l)) => Ok(Some((i + 1, l.map_err(|e| Error::io("reading parameter file", e))?))),
            }
        };
        let bad = |line: usize, msg: &str| Error::Checkpoint(format!("line {line}: {msg}"));

        match next()? {
            Some((_, l)) if l.trim_end() == MAGIC => {}
            _ => return Err(Error::Checkpoint("missing header".into())),
        }
        let mut out = ParamFile::default();
        loop {
            let Some((ln, line)) = next()? else {
                return Err(Error::Checkpoint("truncated file (no end marker)".into()));
            };
            let line = line.trim_end();
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                out.meta.push((k.to_string(), v.to_string()));
                continue;
            }
            let Some(rest) = line.strip_prefix("param ") else {
                return Err(bad(ln, "expected meta, param or end"));
            };
            let fields: Vec<&str> = rest.split(' ').collect();
            let [name, frozen, dims] = fields[..] else {
                return Err(bad(ln, "param header needs name, frozen flag and shape"));
            };
            let frozen = match frozen {
                "0" => false,
                "1" => true,
                _ => return Err(bad(ln, "frozen flag must be 0 or 1")),
            };
            let shape = dims
                .split(',')
                .map(|d| d.parse::<usize>().map_err(|_| bad(ln, "bad dimension")))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            while data.len() < count {
                let Some((vl, vals)) = next()? else {
                    return Err(Error::Checkpoint(format!("truncated values for {name}")));
                };
                for tok in vals.split_whitespace() {
                    let bits = u64::from_str_radix(tok, 16).map_err(|_| bad(vl, "bad hex value"))?;
                    data.push(f64::from_bits(bits));
                }
            }
            if data.len() != count {
                return Err(bad(ln, "value count does not match shape"));
            }
            let mut p = Parameter::new(name, Tensor::new(shape, data)?);
            p.frozen = frozen;
            out.params.push(p);
        }
        Ok(out)
    }
}
