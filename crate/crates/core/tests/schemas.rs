use std::path::PathBuf;

use extractor_core::corpus::{LabelSchema, Task};

fn schema_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../schemas")
        .join(name)
}

#[test]
fn shipped_schema_files_match_builtins() {
    for (file, task) in [
        ("radiology.json", Task::Radiology),
        ("pathology.json", Task::Pathology),
    ] {
        let loaded = LabelSchema::load(&schema_file(file)).unwrap();
        assert_eq!(loaded, LabelSchema::builtin(task), "{file}");
    }
}
