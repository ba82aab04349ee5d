use super::{EdgeRole, EdgeSpec, GateSpec, GraphSpec, NodeKind, NodeSpec, SpecError};
use serde::{Deserialize, Serialize};

const INPUT: &str = "input";
const OUTPUT: &str = "output";

fn check_rates(rates: &[u32]) -> Result<(), SpecError> {
    if rates.is_empty() {
        return Err(SpecError::Config("dilation list is empty".into()));
    }
    if rates.contains(&0) {
        return Err(SpecError::Config("dilation rates must be positive".into()));
    }
    Ok(())
}

/// Parallel 3×3 atrous convolutions over one entrance, concatenated.
pub fn build_aspp(dilations: &[u32], in_ch: u32, branch_ch: u32) -> Result<GraphSpec, SpecError> {
    check_rates(dilations)?;
    let mut sorted = dilations.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        log::warn!("ASPP with duplicate rates {dilations:?}: branches sample identical positions");
    }
    let mut g = GraphSpec::new(format!("aspp{dilations:?}"));
    g.nodes.push(NodeSpec::entrance(INPUT, in_ch));
    let mut heads = Vec::new();
    for (i, &r) in dilations.iter().enumerate() {
        let b = i as u32 + 1;
        let id = format!("b{b}.atrous");
        g.nodes
            .push(NodeSpec::conv(&id, NodeKind::Atrous3x3, in_ch, branch_ch, Some(r)).at(b, 1));
        g.edges.push(EdgeSpec::new(INPUT, &id, EdgeRole::Horizontal));
        heads.push(id);
    }
    let last = if heads.len() == 1 {
        heads.pop().unwrap()
    } else {
        g.nodes.push(NodeSpec::merge("concat", NodeKind::ConcatMerge));
        for h in &heads {
            g.edges.push(EdgeSpec::new(h, "concat", EdgeRole::Horizontal));
        }
        "concat".to_string()
    };
    g.nodes.push(NodeSpec::merge(OUTPUT, NodeKind::Exit));
    g.edges.push(EdgeSpec::new(last, OUTPUT, EdgeRole::Horizontal));
    g.checked()
}

/// Cascade of 3×3 atrous convolutions in ascending dilation order. Layer `l`
/// reads the concatenation of the entrance and every earlier layer; the exit
/// concatenates the entrance with all layer outputs.
pub fn build_denseaspp(dilations: &[u32], in_ch: u32, growth_ch: u32) -> Result<GraphSpec, SpecError> {
    check_rates(dilations)?;
    let mut rates = dilations.to_vec();
    if rates.windows(2).any(|w| w[0] > w[1]) {
        log::warn!("DenseASPP rates {dilations:?} are not ascending; sorting");
        rates.sort_unstable();
    }
    let mut g = GraphSpec::new(format!("denseaspp{rates:?}"));
    g.nodes.push(NodeSpec::entrance(INPUT, in_ch));
    let mut outputs: Vec<String> = Vec::new();
    for (i, &r) in rates.iter().enumerate() {
        let l = i as u32 + 1;
        let conv = format!("l{l}.atrous");
        let conv_in = in_ch + growth_ch * i as u32;
        g.nodes
            .push(NodeSpec::conv(&conv, NodeKind::Atrous3x3, conv_in, growth_ch, Some(r)).at(1, l));
        if outputs.is_empty() {
            g.edges.push(EdgeSpec::new(INPUT, &conv, EdgeRole::Horizontal));
        } else {
            let cat = format!("l{l}.concat");
            g.nodes.push(NodeSpec::merge(&cat, NodeKind::ConcatMerge).at(1, l));
            g.edges.push(EdgeSpec::new(INPUT, &cat, EdgeRole::Horizontal));
            for o in &outputs {
                g.edges.push(EdgeSpec::new(o, &cat, EdgeRole::Horizontal));
            }
            g.edges.push(EdgeSpec::new(&cat, &conv, EdgeRole::Horizontal));
        }
        outputs.push(conv);
    }
    g.nodes.push(NodeSpec::merge("concat", NodeKind::ConcatMerge));
    g.edges.push(EdgeSpec::new(INPUT, "concat", EdgeRole::Horizontal));
    for o in &outputs {
        g.edges.push(EdgeSpec::new(o, "concat", EdgeRole::Horizontal));
    }
    g.nodes.push(NodeSpec::merge(OUTPUT, NodeKind::Exit));
    g.edges.push(EdgeSpec::new("concat", OUTPUT, EdgeRole::Horizontal));
    g.checked()
}

/// A straight chain of `(kernel, dilation)` convolutions with `ch` channels
/// throughout. Kernel 1 layers become squeeze nodes.
pub fn build_serial(chain: &[(u32, u32)], ch: u32) -> Result<GraphSpec, SpecError> {
    let mut g = GraphSpec::new(format!("serial{chain:?}"));
    g.nodes.push(NodeSpec::entrance(INPUT, ch));
    let mut prev = INPUT.to_string();
    for (i, &(k, r)) in chain.iter().enumerate() {
        let l = i as u32 + 1;
        let id = format!("l{l}");
        let node = match k {
            1 => NodeSpec::conv(&id, NodeKind::Squeeze1x1, ch, ch, None),
            3 if r > 0 => NodeSpec::conv(&id, NodeKind::Atrous3x3, ch, ch, Some(r)),
            _ => {
                return Err(SpecError::Config(format!(
                    "layer {l}: kernel {k} dilation {r} unsupported (kernels 1 and 3 only)"
                )))
            }
        };
        g.nodes.push(node.at(1, l));
        g.edges.push(EdgeSpec::new(&prev, &id, EdgeRole::Horizontal));
        prev = id;
    }
    g.nodes.push(NodeSpec::merge(OUTPUT, NodeKind::Exit));
    g.edges.push(EdgeSpec::new(prev, OUTPUT, EdgeRole::Horizontal));
    g.checked()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SqueezeMode {
    /// Every branch squeezes the module input with its own 1×1 conv.
    #[default]
    PerBranch,
    /// One 1×1 squeeze feeds all branches.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperNetConfig {
    /// Dilations of the two atrous layers of each branch, branch 1 first.
    pub grid: Vec<(u32, u32)>,
    pub in_ch: u32,
    pub bottleneck_ch: u32,
    pub out_ch: u32,
    pub gated: bool,
    #[serde(default)]
    pub squeeze: SqueezeMode,
}

/// Grid of bottlenecked branches (squeeze, two atrous layers, excite).
///
/// The input of atrous layer `(b, l)` for `b > 1` merges the horizontal
/// input (the branch's previous layer, or its squeeze for `l = 1`) with the
/// vertical input (the output of layer `(b - 1, l)`). Merges are gated when
/// `cfg.gated`, plain sums otherwise. Branch 1 has no vertical input and no
/// merges. The excitations of all branches are concatenated into the exit.
pub fn build_supernet(cfg: &SuperNetConfig) -> Result<GraphSpec, SpecError> {
    if cfg.grid.is_empty() {
        return Err(SpecError::Config("SuperNet needs at least one branch".into()));
    }
    if cfg.grid.iter().any(|&(a, b)| a == 0 || b == 0) {
        return Err(SpecError::Config("dilation rates must be positive".into()));
    }
    let tag = if cfg.gated { "gps" } else { "supernet" };
    let mut g = GraphSpec::new(format!("{tag}{:?}", cfg.grid));
    g.nodes.push(NodeSpec::entrance(INPUT, cfg.in_ch));
    let c = cfg.bottleneck_ch;
    if cfg.squeeze == SqueezeMode::Shared {
        g.nodes
            .push(NodeSpec::conv("squeeze", NodeKind::Squeeze1x1, cfg.in_ch, c, None));
        g.edges.push(EdgeSpec::new(INPUT, "squeeze", EdgeRole::Horizontal));
    }
    let merge_kind = if cfg.gated { NodeKind::GateMerge } else { NodeKind::SumMerge };
    let mut excites = Vec::new();
    for (i, &(ra, rb)) in cfg.grid.iter().enumerate() {
        let b = i as u32 + 1;
        let mut prev = match cfg.squeeze {
            SqueezeMode::PerBranch => {
                let sq = format!("b{b}.squeeze");
                g.nodes
                    .push(NodeSpec::conv(&sq, NodeKind::Squeeze1x1, cfg.in_ch, c, None).at(b, 0));
                g.edges.push(EdgeSpec::new(INPUT, &sq, EdgeRole::Horizontal));
                sq
            }
            SqueezeMode::Shared => "squeeze".to_string(),
        };
        for (l, r) in [(1u32, ra), (2u32, rb)] {
            let conv = format!("b{b}.l{l}.atrous");
            let conv_input = if b > 1 {
                let merge = format!("b{b}.l{l}.merge");
                let vertical = format!("b{}.l{l}.atrous", b - 1);
                g.nodes.push(NodeSpec::merge(&merge, merge_kind).at(b, l));
                g.edges.push(EdgeSpec::new(&prev, &merge, EdgeRole::Horizontal));
                g.edges.push(EdgeSpec::new(&vertical, &merge, EdgeRole::Vertical));
                if cfg.gated {
                    g.gates.push(GateSpec {
                        merge: merge.clone(),
                        vertical,
                        horizontal: prev.clone(),
                    });
                }
                merge
            } else {
                prev.clone()
            };
            g.nodes
                .push(NodeSpec::conv(&conv, NodeKind::Atrous3x3, c, c, Some(r)).at(b, l));
            g.edges.push(EdgeSpec::new(&conv_input, &conv, EdgeRole::Horizontal));
            prev = conv;
        }
        let ex = format!("b{b}.excite");
        g.nodes
            .push(NodeSpec::conv(&ex, NodeKind::Excite1x1, c, cfg.out_ch, None).at(b, 3));
        g.edges.push(EdgeSpec::new(&prev, &ex, EdgeRole::Horizontal));
        excites.push(ex);
    }
    g.nodes.push(NodeSpec::merge("concat", NodeKind::ConcatMerge));
    for e in &excites {
        g.edges.push(EdgeSpec::new(e, "concat", EdgeRole::Horizontal));
    }
    g.nodes.push(NodeSpec::merge(OUTPUT, NodeKind::Exit));
    g.edges.push(EdgeSpec::new("concat", OUTPUT, EdgeRole::Horizontal));
    g.checked()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::{TUNED_GRID, UNTUNED_GRID};
    use proptest::prelude::*;

    fn supernet(grid: &[(u32, u32)], gated: bool) -> GraphSpec {
        build_supernet(&SuperNetConfig {
            grid: grid.to_vec(),
            in_ch: 16,
            bottleneck_ch: 8,
            out_ch: 12,
            gated,
            squeeze: SqueezeMode::PerBranch,
        })
        .unwrap()
    }

    fn count(g: &GraphSpec, kind: NodeKind) -> usize {
        g.nodes.iter().filter(|n| n.kind == kind).count()
    }

    /// Largest sum of dilations along any entrance-to-exit path.
    fn longest_dilation_path(g: &GraphSpec) -> u32 {
        let order = g.topo_order().unwrap();
        let mut best = vec![0u32; g.nodes.len()];
        for &i in &order {
            let own = g.nodes[i].dilation.unwrap_or(0);
            let inbound = g.inputs_of(i).iter().map(|(s, _)| best[*s]).max().unwrap_or(0);
            best[i] = inbound + own;
        }
        g.exits().iter().map(|&e| best[e]).max().unwrap()
    }

    #[test]
    fn aspp_shape() {
        let g = build_aspp(&[1, 12, 24, 36], 2048, 256).unwrap();
        assert_eq!(count(&g, NodeKind::Atrous3x3), 4);
        assert_eq!(count(&g, NodeKind::ConcatMerge), 1);
        assert_eq!(g.channels().unwrap()[g.node_index("output").unwrap()], 1024);
    }

    #[test]
    fn aspp_single_rate_is_one_conv() {
        let g = build_aspp(&[5], 3, 3).unwrap();
        assert_eq!(g.nodes.len(), 3);
        assert_eq!(count(&g, NodeKind::ConcatMerge), 0);
        assert!(build_aspp(&[], 3, 3).is_err());
        assert!(build_aspp(&[0], 3, 3).is_err());
    }

    #[test]
    fn denseaspp_shape_and_path() {
        let g = build_denseaspp(&[1, 12, 24, 36], 64, 16).unwrap();
        assert_eq!(count(&g, NodeKind::Atrous3x3), 4);
        assert_eq!(longest_dilation_path(&g), 73);
        let last = g.node("l4.atrous").unwrap();
        assert_eq!(last.in_ch, Some(64 + 3 * 16));
        let sorted = build_denseaspp(&[24, 1, 36, 12], 64, 16).unwrap();
        assert_eq!(sorted.nodes, g.nodes);
    }

    #[test]
    fn denseaspp_single_rate() {
        let g = build_denseaspp(&[7], 4, 4).unwrap();
        assert_eq!(count(&g, NodeKind::Atrous3x3), 1);
        assert_eq!(longest_dilation_path(&g), 7);
    }

    #[test]
    fn supernet_reference_connectivity_path_sums() {
        assert_eq!(longest_dilation_path(&supernet(&UNTUNED_GRID, false)), 109);
        assert_eq!(longest_dilation_path(&supernet(&TUNED_GRID, true)), 105);
    }

    #[test]
    fn supernet_single_branch_is_plain_bottleneck() {
        let g = supernet(&[(1, 1)], false);
        assert_eq!(count(&g, NodeKind::Atrous3x3), 2);
        assert_eq!(count(&g, NodeKind::SumMerge) + count(&g, NodeKind::GateMerge), 0);
        assert!(build_supernet(&SuperNetConfig {
            grid: vec![],
            in_ch: 1,
            bottleneck_ch: 1,
            out_ch: 1,
            gated: false,
            squeeze: SqueezeMode::PerBranch,
        })
        .is_err());
    }

    #[test]
    fn gated_and_plain_differ_only_in_merge_kind() {
        let plain = supernet(&UNTUNED_GRID, false);
        let gated = supernet(&UNTUNED_GRID, true);
        assert_eq!(plain.edges, gated.edges);
        assert_eq!(plain.nodes.len(), gated.nodes.len());
        let mut differing = 0;
        for (a, b) in plain.nodes.iter().zip(&gated.nodes) {
            if a != b {
                differing += 1;
                assert_eq!((a.kind, b.kind), (NodeKind::SumMerge, NodeKind::GateMerge));
                assert_eq!(a.id, b.id);
            }
        }
        assert_eq!(differing, 6);
        assert_eq!(gated.gates.len(), 6);
        assert!(plain.gates.is_empty());
    }

    #[test]
    fn shared_squeeze_variant() {
        let g = build_supernet(&SuperNetConfig {
            grid: UNTUNED_GRID.to_vec(),
            in_ch: 2048,
            bottleneck_ch: 256,
            out_ch: 1024,
            gated: true,
            squeeze: SqueezeMode::Shared,
        })
        .unwrap();
        assert_eq!(count(&g, NodeKind::Squeeze1x1), 1);
        assert_eq!(longest_dilation_path(&g), 109);
    }

    #[test]
    fn canonical_builders_round_trip() {
        for g in [
            build_aspp(&[1, 12, 24, 36], 8, 4).unwrap(),
            build_denseaspp(&[1, 12, 24, 36], 8, 4).unwrap(),
            build_serial(&[(3, 1), (1, 0), (3, 2)], 4).unwrap(),
            supernet(&UNTUNED_GRID, false),
            supernet(&TUNED_GRID, true),
        ] {
            let text = g.to_json();
            let back = GraphSpec::from_json(&text).unwrap();
            assert_eq!(back, g);
            assert_eq!(back.to_json(), text);
        }
    }

    proptest! {
        #[test]
        fn random_builders_validate(rates in proptest::collection::vec(1u32..40, 1..6),
                                    pairs in proptest::collection::vec((1u32..40, 1u32..40), 1..5),
                                    gated: bool) {
            prop_assert!(build_aspp(&rates, 3, 2).unwrap().validate().is_ok());
            prop_assert!(build_denseaspp(&rates, 3, 2).unwrap().validate().is_ok());
            prop_assert!(supernet(&pairs, gated).validate().is_ok());
        }
    }
}
