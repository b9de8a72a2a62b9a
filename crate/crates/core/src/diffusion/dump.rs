//! Debug dumps of a trajectory: a text manifest followed by `PXG1` frames,
//! states first (`x_T` .. `x_0`) then the per-transition means.
//!
//! ```text
//! PXT1
//! steps 20
//! class 1
//! seed 42
//! sigmas 0.001 0.07 ...
//! end
//! ```

use super::Trajectory;
use crate::error::{Error, Result};
use crate::grid::Grid;

const MAGIC: &str = "PXT1\n";
const MAX_STEPS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDump {
    pub class_id: usize,
    pub seed: u64,
    pub sigmas: Vec<f64>,
    pub states: Vec<Grid>,
    pub means: Vec<Grid>,
}

impl From<&Trajectory> for TrajectoryDump {
    fn from(t: &Trajectory) -> Self {
        Self {
            class_id: t.condition.class_id,
            seed: t.rng_seed,
            sigmas: t.step_sigmas.clone(),
            states: t.states.clone(),
            means: t.means.clone(),
        }
    }
}

impl TrajectoryDump {
    pub fn encode(&self) -> Vec<u8> {
        let sigmas: Vec<String> = self.sigmas.iter().map(|s| format!("{s:?}")).collect();
        let mut out = format!(
            "{MAGIC}steps {}\nclass {}\nseed {}\nsigmas {}\nend\n",
            self.means.len(),
            self.class_id,
            self.seed,
            sigmas.join(" ")
        )
        .into_bytes();
        for g in self.states.iter().chain(&self.means) {
            out.extend(g.encode());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC.as_bytes())
            .ok_or_else(|| Error::format("trajectory dump", "missing PXT1 magic"))?;
        let mut pos = 0;
        let mut line = |key: &str| -> Result<String> {
            let nl = rest[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::format("trajectory dump", "truncated manifest"))?;
            let text = std::str::from_utf8(&rest[pos..pos + nl])
                .map_err(|_| Error::format("trajectory dump", "manifest is not UTF-8"))?;
            pos += nl + 1;
            match text.split_once(' ') {
                Some((k, v)) if k == key => Ok(v.to_string()),
                _ if text == key => Ok(String::new()),
                _ => Err(Error::format("trajectory dump", format!("expected {key:?} line"))),
            }
        };
        let bad = |what: &str| Error::format("trajectory dump", format!("bad {what}"));
        let steps: usize = line("steps")?.parse().map_err(|_| bad("steps"))?;
        if steps == 0 || steps > MAX_STEPS {
            return Err(bad("steps"));
        }
        let class_id: usize = line("class")?.parse().map_err(|_| bad("class"))?;
        let seed: u64 = line("seed")?.parse().map_err(|_| bad("seed"))?;
        let sigmas: Vec<f64> = line("sigmas")?
            .split(' ')
            .map(|s| s.parse::<f64>().ok().filter(|v| v.is_finite() && *v > 0.0))
            .collect::<Option<_>>()
            .ok_or_else(|| bad("sigmas"))?;
        if sigmas.len() != steps {
            return Err(bad("sigma count"));
        }
        line("end")?;

        let mut body = &rest[pos..];
        let mut frames = Vec::with_capacity(2 * steps + 1);
        for _ in 0..2 * steps + 1 {
            let (g, used) = Grid::decode(body)?;
            if frames.first().is_some_and(|f: &Grid| !f.same_shape(&g)) {
                return Err(bad("frame shape"));
            }
            frames.push(g);
            body = &body[used..];
        }
        if !body.is_empty() {
            return Err(bad("trailing data"));
        }
        let means = frames.split_off(steps + 1);
        Ok(Self {
            class_id,
            seed,
            sigmas,
            states: frames,
            means,
        })
    }
}
