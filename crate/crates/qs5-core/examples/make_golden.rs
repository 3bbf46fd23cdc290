//! Regenerates the golden serialization fixture used by the acceptance
//! suite. Run from the crate root:
//!   cargo run -p qs5-core --example make_golden

use qs5_core::model::{ModelBundle, ModelMeta, QuantConfig, TaskKind};
use qs5_core::serialize;
use qs5_core::ssm::Readout;

fn main() {
    let meta = ModelMeta {
        task: TaskKind::Regression,
        h_in: 3,
        h: 4,
        p: 3,
        depth: 1,
        h_out: 3,
        seed: 2024,
        readout: Readout::Current,
    };
    let m = ModelBundle::new(meta, QuantConfig::parse("W8A8SSM4").unwrap());
    let bytes = serialize::model_to_bytes(&m);
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/model.qssm");
    std::fs::write(path, &bytes).unwrap();
    println!("wrote {} bytes to {path}", bytes.len());
}
