//! Post-processing alone: label maps used as probabilities are split into
//! instances by subtracting edges, opening and labelling.

use owpsnet::data::{generate_dataset, SyntheticSceneConfig};
use owpsnet::postprocess::{connected_components, segment_pipeline, Connectivity, PostprocessConfig};

fn main() -> owpsnet::Result<()> {
    let cfg = SyntheticSceneConfig { overlap_prob: 1.0, ..Default::default() };
    let pp = PostprocessConfig::default();
    for s in generate_dataset(&cfg, 3, 6)? {
        let (h, w) = (s.height(), s.width());
        let merged = connected_components(&s.region_mask, Connectivity::Four).count();
        let result = segment_pipeline(h, w, &s.region_mask.to_f32(), &s.edge_mask.to_f32(), &pp)?;
        println!(
            "true {} | region components {merged} | after edge subtraction and opening {}",
            s.true_count,
            result.count()
        );
    }
    Ok(())
}
