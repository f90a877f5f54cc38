//! Static cost accounting, receptive-field geometry and spatial heat maps.

mod cost;
mod maps;
mod rf;

pub use cost::{count_madds, count_params, model_cost, nodes_cost, CostReport, CostRow};
pub use maps::{erf_map, erf_map_averaged, importance_map, HeatMap, ImportanceMap};
pub use rf::{receptive_field, AxisRf, ReceptiveField, RfLayer};
