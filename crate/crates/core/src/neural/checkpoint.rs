//! Parameter checkpoints: a text header (role, layers, metadata, training
//! configuration) followed by binary parameter records holding name, shape,
//! and `f32` LE values.

use std::fmt::Write as _;

use super::layers::{validate_layers, LayerSpec, Layout, NetParams, NetRole};
use super::tensor::Tensor;
use super::GanTrainConfig;
use crate::error::{PctError, Result};

const MAGIC: &str = "PCTCKPT 1";

pub fn write_checkpoint(net: &NetParams, config: &GanTrainConfig) -> Vec<u8> {
    let mut h = String::new();
    let _ = writeln!(h, "{MAGIC}");
    let _ = writeln!(h, "role {}", net.role);
    let _ = match net.input {
        Layout::Points(c) => writeln!(h, "input points {c}"),
        Layout::Image(c) => writeln!(h, "input image {c}"),
    };
    for l in &net.layers {
        let _ = writeln!(h, "layer {}", l.encode());
    }
    for (k, v) in &net.meta {
        let _ = writeln!(h, "meta {k} {v:?}");
    }
    let _ = writeln!(h, "seed {}", net.seed);
    for (k, v) in config.to_pairs() {
        let _ = writeln!(h, "config {k} {v}");
    }
    let _ = writeln!(h, "params {}", net.params.len());
    let _ = writeln!(h, "end");
    let mut out = h.into_bytes();
    for (name, t) in &net.params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(PctError::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn line(&mut self) -> Result<&str> {
        let rest = &self.bytes[self.pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| PctError::Format("checkpoint header not terminated".into()))?;
        self.pos += nl + 1;
        std::str::from_utf8(&rest[..nl]).map_err(|_| PctError::Format("checkpoint header is not UTF-8".into()))
    }
}

/// Parses a checkpoint; parameter values come back rounded to `f32`.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(NetParams, GanTrainConfig)> {
    let bad = |m: String| PctError::Format(format!("checkpoint: {m}"));
    let mut r = Reader { bytes, pos: 0 };
    if r.line()? != MAGIC {
        return Err(bad("missing magic".into()));
    }
    let mut role = None;
    let mut input = None;
    let mut layers = Vec::new();
    let mut meta = std::collections::BTreeMap::new();
    let mut seed = 0u64;
    let mut config = GanTrainConfig::default();
    let mut count = None;
    loop {
        let line = r.line()?.to_string();
        if line == "end" {
            break;
        }
        let (key, rest) = line.split_once(' ').ok_or_else(|| bad(format!("bad line `{line}`")))?;
        match key {
            "role" => role = Some(rest.parse::<NetRole>()?),
            "input" => {
                input = Some(match rest.split_once(' ') {
                    Some(("points", c)) => Layout::Points(c.parse().map_err(|_| bad(line.clone()))?),
                    Some(("image", c)) => Layout::Image(c.parse().map_err(|_| bad(line.clone()))?),
                    _ => return Err(bad(format!("bad input `{rest}`"))),
                })
            }
            "layer" => layers.push(LayerSpec::decode(rest)?),
            "meta" => {
                let (k, v) = rest.split_once(' ').ok_or_else(|| bad(line.clone()))?;
                meta.insert(k.to_string(), v.parse::<f64>().map_err(|_| bad(line.clone()))?);
            }
            "seed" => seed = rest.parse().map_err(|_| bad(line.clone()))?,
            "config" => {
                let (k, v) = rest.split_once(' ').ok_or_else(|| bad(line.clone()))?;
                config.set(k, v)?;
            }
            "params" => count = Some(rest.parse::<usize>().map_err(|_| bad(line.clone()))?),
            _ => return Err(bad(format!("unknown header key `{key}`"))),
        }
    }
    let role = role.ok_or_else(|| bad("missing role".into()))?;
    let input = input.ok_or_else(|| bad("missing input layout".into()))?;
    let count = count.ok_or_else(|| bad("missing parameter count".into()))?;
    validate_layers(input, &layers)?;
    let mut net = NetParams::new(role, input, layers, seed)?;
    net.meta = meta;
    let expected = net.params.len();
    if count != expected {
        return Err(bad(format!("{count} parameters listed, architecture needs {expected}")));
    }
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| bad("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let slot = net
            .params
            .get_mut(&name)
            .ok_or_else(|| bad(format!("unexpected parameter `{name}`")))?;
        if slot.shape() != shape.as_slice() {
            return Err(bad(format!("parameter `{name}` has shape {shape:?}, expected {:?}", slot.shape())));
        }
        *slot = Tensor::new(shape, values)?;
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes".into()));
    }
    Ok((net, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::nets;

    #[test]
    fn round_trip_is_stable_after_rounding() {
        let g = nets::generator_s(9, 8, 16, 12.5, 4).unwrap();
        let cfg = GanTrainConfig {
            seed: 17,
            ..Default::default()
        };
        let bytes = write_checkpoint(&g, &cfg);
        let (back, cfg2) = read_checkpoint(&bytes).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back.role, g.role);
        assert_eq!(back.layers, g.layers);
        assert_eq!(back.meta, g.meta);
        for (name, t) in &g.params {
            let rounded: Vec<f64> = t.values().iter().map(|&v| v as f32 as f64).collect();
            assert_eq!(back.params[name].values(), rounded.as_slice());
        }
        assert_eq!(write_checkpoint(&back, &cfg2), bytes);
    }

    #[test]
    fn truncation_detected() {
        let g = nets::discriminator_a(1, 10.0).unwrap();
        let bytes = write_checkpoint(&g, &GanTrainConfig::default());
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(read_checkpoint(b"nope\n").is_err());
    }
}
