//! Problem files: parsing, validation and the effective configuration.

use std::path::{Path, PathBuf};

use anyhow::Context;
use convexopt_core::functional::param_schema;
use convexopt_core::{builtin, Params, ProblemSpec, Regime, SolverOptions};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalEntry {
    pub name: String,
    #[serde(default)]
    pub params: Params,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum RegimeEntry {
    Annulus {
        a: f64,
        b: f64,
    },
    Volume {
        m0: f64,
        /// Safeguard box `[lo, hi]` on `u`; defaults to `[0.05, 20]·√(π/m0)`.
        #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
        bounds: Option<[f64; 2]>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outputs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub svg: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<PathBuf>,
}

fn default_grid() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub functional: FunctionalEntry,
    pub regime: RegimeEntry,
    #[serde(default = "default_grid")]
    pub grid_n: usize,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub outputs: Outputs,
}

impl ProblemFile {
    /// Parses a problem document; schema errors carry the JSON pointer of
    /// the offending key.
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let pointer = if path == "." {
                String::new()
            } else {
                format!("/{}", path.replace('.', "/"))
            };
            anyhow::anyhow!("schema violation at `{pointer}`: {}", e.into_inner())
        })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Fills every default (functional parameters, safeguard box, output
    /// names) so the echoed document reruns identically.
    pub fn materialize(&self) -> anyhow::Result<ProblemFile> {
        let mut out = self.clone();
        let name = &self.functional.name;
        let schema = param_schema(name).ok_or_else(|| {
            anyhow::anyhow!(
                "functional.name: unknown functional `{name}` (expected one of {})",
                convexopt_core::functional::BUILTIN_NAMES.join(", ")
            )
        })?;
        // Functionals defined relative to the annulus inherit its radii.
        if let RegimeEntry::Annulus { a, b } = self.regime {
            for (key, value) in [("a", a), ("b", b)] {
                if schema.contains(&key) {
                    out.functional.params.entry(key.into()).or_insert(value);
                }
            }
        }
        let spec = builtin(name, &out.functional.params)
            .map_err(|e| anyhow::anyhow!("functional.params: {e}"))?;
        out.functional.params = spec.params().clone();
        if let RegimeEntry::Volume { m0, bounds: None } = self.regime {
            if let Regime::Volume { u_lo, u_hi, .. } = Regime::volume(m0) {
                out.regime = RegimeEntry::Volume {
                    m0,
                    bounds: Some([u_lo, u_hi]),
                };
            }
        }
        let o = &mut out.outputs;
        o.csv.get_or_insert_with(|| "u.csv".into());
        o.svg.get_or_insert_with(|| "shape.svg".into());
        o.certificate
            .get_or_insert_with(|| "certificate.json".into());
        Ok(out)
    }

    pub fn regime(&self) -> Regime {
        match self.regime {
            RegimeEntry::Annulus { a, b } => Regime::Annulus { a, b },
            RegimeEntry::Volume {
                m0,
                bounds: Some([lo, hi]),
            } => Regime::Volume {
                m0,
                u_lo: lo,
                u_hi: hi,
            },
            RegimeEntry::Volume { m0, bounds: None } => Regime::volume(m0),
        }
    }

    /// The validated problem and solver options.
    pub fn build(&self) -> anyhow::Result<(ProblemSpec, SolverOptions)> {
        let eff = self.materialize()?;
        let functional = builtin(&eff.functional.name, &eff.functional.params)?;
        let regime = eff.regime();
        let problem = ProblemSpec {
            functional,
            grid_n: eff.grid_n,
            regime,
            apply_cutoff: !regime.is_volume(),
        };
        problem.validate()?;
        eff.solver.validate()?;
        Ok((problem, eff.solver.clone()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}
