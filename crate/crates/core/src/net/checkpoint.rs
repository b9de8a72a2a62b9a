//! Checkpoint files: `PXC1\n`, a text block describing the network, then the
//! flat parameter vector as one `PXG1` frame of shape `1 x 1 x n`.
//!
//! ```text
//! PXC1
//! spec 3 24 24 32 3 16
//! layer time_full linear 32 16 @0
//! ...
//! end
//! PXG1
//! 1 1 30819
//! <little-endian f64 payload>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::{layer_table, DenoiserParams, LayerKind, NetSpec};
use crate::error::{Error, Result};
use crate::grid::Grid;

const MAGIC: &str = "PXC1\n";
const MAX_HEADER: usize = 16 * 1024;

impl DenoiserParams {
    pub fn layer_spec_text(&self) -> String {
        let s = &self.spec;
        let mut out = format!(
            "spec {} {} {} {} {} {}\n",
            s.image_channels, s.height, s.width, s.base_channels, s.num_classes, s.time_dim
        );
        for l in &self.layers {
            let dims: Vec<String> = l.shape.iter().map(|d| d.to_string()).collect();
            writeln!(out, "layer {} {} {} @{}", l.name, l.kind.as_str(), dims.join(" "), l.offset)
                .unwrap();
        }
        out.push_str("end\n");
        out
    }

    pub fn encode_checkpoint(&self) -> Vec<u8> {
        let mut out = MAGIC.as_bytes().to_vec();
        out.extend_from_slice(self.layer_spec_text().as_bytes());
        let theta = Grid::from_vec(1, 1, self.values.len(), self.values.clone())
            .expect("parameters are finite");
        out.extend(theta.encode());
        out
    }

    pub fn decode_checkpoint(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC.as_bytes())
            .ok_or_else(|| Error::format("checkpoint", "missing PXC1 magic"))?;
        let end = find_end(rest)?;
        let header = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::format("checkpoint", "header is not UTF-8"))?;
        let mut lines = header.lines();
        let spec = parse_spec(lines.next().unwrap_or(""))?;
        spec.validate()
            .map_err(|e| Error::format("checkpoint", e.to_string()))?;
        // Reject specs the buffer cannot back before allocating for them.
        let declared: usize = layer_table(&spec)
            .iter()
            .map(|l| l.weight_len() + l.bias_len())
            .sum();
        if declared.saturating_mul(8) > bytes.len() {
            return Err(Error::format(
                "checkpoint",
                format!("spec declares {declared} parameters but the buffer is too short"),
            ));
        }
        let mut params = DenoiserParams::zeros(spec)?;

        let layer_lines: Vec<&str> = lines.collect();
        if layer_lines.len() != params.layers.len() {
            return Err(Error::format("checkpoint", "layer count does not match the network"));
        }
        for (line, expected) in layer_lines.iter().zip(layer_table(&spec)) {
            let dims: Vec<String> = expected.shape.iter().map(|d| d.to_string()).collect();
            let want = format!(
                "layer {} {} {} @{}",
                expected.name,
                expected.kind.as_str(),
                dims.join(" "),
                expected.offset
            );
            if *line != want {
                return Err(Error::format("checkpoint", format!("unexpected layer line {line:?}")));
            }
        }

        let body = &rest[end + "end\n".len()..];
        let theta = Grid::from_bytes(body)?;
        if theta.shape() != (1, 1, params.num_params()) {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "parameter frame {:?} does not hold {} values",
                    theta.shape(),
                    params.num_params()
                ),
            ));
        }
        params.values = theta.into_vec();
        Ok(params)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode_checkpoint())?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode_checkpoint(&std::fs::read(path)?)
    }
}

/// Offset of the `end\n` line terminating the text block.
fn find_end(rest: &[u8]) -> Result<usize> {
    let window = &rest[..rest.len().min(MAX_HEADER)];
    let mut line_start = 0;
    for (i, &b) in window.iter().enumerate() {
        if b == b'\n' {
            if &window[line_start..i] == b"end" {
                return Ok(line_start);
            }
            line_start = i + 1;
        }
    }
    Err(Error::format("checkpoint", "unterminated layer block"))
}

fn parse_spec(line: &str) -> Result<NetSpec> {
    let fields: Vec<&str> = line.split(' ').collect();
    if fields.len() != 7 || fields[0] != "spec" {
        return Err(Error::format("checkpoint", "bad spec line"));
    }
    let nums: Vec<usize> = fields[1..]
        .iter()
        .map(|f| {
            f.parse::<usize>()
                .ok()
                .filter(|&n| n <= 4096)
                .ok_or_else(|| Error::format("checkpoint", format!("bad spec field {f:?}")))
        })
        .collect::<Result<_>>()?;
    Ok(NetSpec {
        image_channels: nums[0],
        height: nums[1],
        width: nums[2],
        base_channels: nums[3],
        num_classes: nums[4],
        time_dim: nums[5],
    })
}

impl std::str::FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(LayerKind::Linear),
            "embedding" => Ok(LayerKind::Embedding),
            "conv3x3" => Ok(LayerKind::Conv3x3 { stride: 1 }),
            "conv3x3s2" => Ok(LayerKind::Conv3x3 { stride: 2 }),
            _ => Err(Error::format("checkpoint", format!("unknown layer kind {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> NetSpec {
        NetSpec {
            image_channels: 3,
            height: 4,
            width: 4,
            base_channels: 2,
            num_classes: 2,
            time_dim: 2,
        }
    }

    #[test]
    fn roundtrip_preserves_values_bitwise() {
        let p = DenoiserParams::init(spec(), 4).unwrap();
        let q = DenoiserParams::decode_checkpoint(&p.encode_checkpoint()).unwrap();
        assert_eq!(p.values, q.values);
        assert_eq!(p.layers, q.layers);
        assert_eq!(p.spec, q.spec);
    }

    #[test]
    fn header_starts_with_magic_and_spec() {
        let bytes = DenoiserParams::zeros(spec()).unwrap().encode_checkpoint();
        let text = String::from_utf8_lossy(&bytes[..60]);
        assert!(text.starts_with("PXC1\nspec 3 4 4 2 2 2\nlayer time_full linear 2 2 @0\n"));
    }

    #[test]
    fn rejects_corruption() {
        let good = DenoiserParams::zeros(spec()).unwrap().encode_checkpoint();
        assert!(DenoiserParams::decode_checkpoint(&good[1..]).is_err());
        assert!(DenoiserParams::decode_checkpoint(&good[..good.len() - 8]).is_err());
        let tampered = String::from_utf8_lossy(&good)
            .replace("layer down conv3x3s2", "layer down conv3x3")
            .into_bytes();
        assert!(DenoiserParams::decode_checkpoint(&tampered).is_err());
        assert!(DenoiserParams::decode_checkpoint(b"PXC1\nspec 3 5 4 2 2 2\nend\n").is_err());
        let huge = b"PXC1\nspec 3 4096 4096 4096 2 4096\nend\n";
        let err = DenoiserParams::decode_checkpoint(huge).unwrap_err().to_string();
        assert!(err.contains("too short"), "{err}");
        assert_eq!("conv3x3s2".parse::<LayerKind>().unwrap(), LayerKind::Conv3x3 { stride: 2 });
    }
}
