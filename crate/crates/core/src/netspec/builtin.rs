//! Named graph configurations used by the report and the CLI.

use super::{build_aspp, build_denseaspp, build_supernet, GraphSpec, SpecError, SqueezeMode, SuperNetConfig};
use std::fmt;
use std::str::FromStr;

pub const ASPP_RATES: [u32; 4] = [1, 12, 24, 36];
pub const UNTUNED_GRID: [(u32, u32); 4] = [(1, 1), (12, 12), (24, 24), (36, 36)];
pub const TUNED_GRID: [(u32, u32); 4] = [(1, 3), (11, 13), (23, 29), (33, 37)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Builtin {
    Aspp,
    DenseAspp,
    SupernetUntuned,
    SupernetTuned,
    GpsUntuned,
    GpsTuned,
}

/// Channel widths the builtins are instantiated with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelProfile {
    /// Backbone-sized widths: 2048 input channels; ASPP branches of 256;
    /// DenseASPP growth 128; SuperNet with one shared 2048→256 squeeze, 256
    /// wide atrous layers and 1024-channel excitations.
    Reference,
    /// Small widths for running the network on a CPU: ASPP branches and
    /// DenseASPP growth of 32; SuperNet with per-branch squeezes to 64
    /// channels and 128-channel excitations.
    Desk { in_ch: u32 },
}

impl Builtin {
    pub const ALL: [Builtin; 6] = [
        Builtin::Aspp,
        Builtin::DenseAspp,
        Builtin::SupernetUntuned,
        Builtin::SupernetTuned,
        Builtin::GpsUntuned,
        Builtin::GpsTuned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Builtin::Aspp => "aspp",
            Builtin::DenseAspp => "denseaspp",
            Builtin::SupernetUntuned => "supernet-untuned",
            Builtin::SupernetTuned => "supernet-tuned",
            Builtin::GpsUntuned => "gps-untuned",
            Builtin::GpsTuned => "gps-tuned",
        }
    }

    pub fn grid(self) -> Option<[(u32, u32); 4]> {
        match self {
            Builtin::SupernetUntuned | Builtin::GpsUntuned => Some(UNTUNED_GRID),
            Builtin::SupernetTuned | Builtin::GpsTuned => Some(TUNED_GRID),
            _ => None,
        }
    }

    pub fn gated(self) -> bool {
        matches!(self, Builtin::GpsUntuned | Builtin::GpsTuned)
    }

    /// Human-readable dilation setting, e.g. `{1,12,24,36}` or `{(1,3),...}`.
    pub fn dilation_setting(self) -> String {
        match self.grid() {
            None => format!(
                "{{{}}}",
                ASPP_RATES.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",")
            ),
            Some(grid) => format!(
                "{{{}}}",
                grid.iter()
                    .map(|(a, b)| format!("({a},{b})"))
                    .collect::<Vec<_>>()
                    .join(",")
            ),
        }
    }

    pub fn supernet_config(self, profile: ChannelProfile) -> Option<SuperNetConfig> {
        let grid = self.grid()?.to_vec();
        let (in_ch, bottleneck_ch, out_ch, squeeze) = match profile {
            ChannelProfile::Reference => (2048, 256, 1024, SqueezeMode::Shared),
            ChannelProfile::Desk { in_ch } => (in_ch, 64, 128, SqueezeMode::PerBranch),
        };
        Some(SuperNetConfig {
            grid,
            in_ch,
            bottleneck_ch,
            out_ch,
            gated: self.gated(),
            squeeze,
        })
    }

    pub fn build(self, profile: ChannelProfile) -> Result<GraphSpec, SpecError> {
        let (in_ch, branch_ch, growth_ch) = match profile {
            ChannelProfile::Reference => (2048, 256, 128),
            ChannelProfile::Desk { in_ch } => (in_ch, 32, 32),
        };
        let mut g = match self {
            Builtin::Aspp => build_aspp(&ASPP_RATES, in_ch, branch_ch)?,
            Builtin::DenseAspp => build_denseaspp(&ASPP_RATES, in_ch, growth_ch)?,
            _ => build_supernet(&self.supernet_config(profile).expect("grid builtin"))?,
        };
        g.name = self.name().to_string();
        Ok(g)
    }
}

impl fmt::Display for Builtin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Builtin {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Builtin::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Builtin::ALL.iter().map(|b| b.name()).collect();
                SpecError::Config(format!("unknown builtin `{s}`; expected one of {}", names.join(", ")))
            })
    }
}
