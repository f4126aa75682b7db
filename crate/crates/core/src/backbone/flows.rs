use std::fmt;

use super::config::Variant;
use crate::error::{Result, TitError};

/// Horizontal and vertical information-flow counts of a backbone.
///
/// Horizontal flows are the spatial (inner) and temporal (outer) block
/// applications; vertical flows are the layer-to-layer hand-offs between
/// them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FlowCounts {
    pub spatial: usize,
    pub temporal: usize,
    pub spatial_spatial: usize,
    pub temporal_temporal: usize,
    pub spatial_temporal: usize,
    pub temporal_spatial: usize,
}

impl FlowCounts {
    pub const CSV_HEADER: [&'static str; 9] = [
        "variant", "L", "K", "spatial", "temporal", "s_s", "t_t", "s_t", "t_s",
    ];

    pub fn as_array(&self) -> [usize; 6] {
        [
            self.spatial,
            self.temporal,
            self.spatial_spatial,
            self.temporal_temporal,
            self.spatial_temporal,
            self.temporal_spatial,
        ]
    }
}

impl fmt::Display for FlowCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "spatial {} temporal {} S-S {} T-T {} S-T {} T-S {}",
            self.spatial,
            self.temporal,
            self.spatial_spatial,
            self.temporal_temporal,
            self.spatial_temporal,
            self.temporal_spatial
        )
    }
}

/// Counts the flows of an `L`-layer backbone over `K` timesteps.
pub fn count_information_flows(
    num_blocks: usize,
    context_len: usize,
    variant: Variant,
) -> Result<FlowCounts> {
    let (l, k) = (num_blocks, context_len);
    if l == 0 || k == 0 {
        return Err(TitError::config("num_blocks", "L and K must be at least 1"));
    }
    match variant {
        // The inner stack feeds the outer stack once per timestep, at the top.
        Variant::Vanilla => Ok(FlowCounts {
            spatial: l * k,
            temporal: l,
            spatial_spatial: (l - 1) * k,
            temporal_temporal: l - 1,
            spatial_temporal: k,
            temporal_spatial: 0,
        }),
        // Every layer hands its class tokens to its own outer block, and
        // every outer output reaches the head through the dense connection.
        Variant::Enhanced => Ok(FlowCounts {
            spatial: l * k,
            temporal: l,
            spatial_spatial: (l - 1) * k,
            temporal_temporal: l,
            spatial_temporal: l * k,
            temporal_spatial: 0,
        }),
        other => Err(TitError::config(
            "variant",
            format!("flow counts are defined for vanilla and enhanced, not {other}"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_examples() {
        let v = count_information_flows(2, 4, Variant::Vanilla).unwrap();
        assert_eq!(v.as_array(), [8, 2, 4, 1, 4, 0]);
        let e = count_information_flows(2, 4, Variant::Enhanced).unwrap();
        assert_eq!(e.as_array(), [8, 2, 4, 2, 8, 0]);
        let single = count_information_flows(1, 3, Variant::Vanilla).unwrap();
        assert_eq!((single.spatial_spatial, single.temporal_temporal), (0, 0));
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(count_information_flows(0, 1, Variant::Vanilla).is_err());
        assert!(count_information_flows(1, 1, Variant::WoInner).is_err());
    }
}
