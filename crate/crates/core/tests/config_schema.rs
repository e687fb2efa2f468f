//! Keeps docs/config.schema.json in step with the config types: every
//! serialized object must match the schema's property set exactly, enum
//! values must be listed, and documented defaults must equal `Default`.

use serde_json::{json, Map, Value};
use xmeta::cli::{DataSource, ExperimentConfig};
use xmeta::episodes::Temperature;
use xmeta::metalearn::Learner;

fn schema() -> Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/config.schema.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn resolve<'a>(root: &'a Value, node: &'a Value) -> &'a Value {
    match node.get("$ref").and_then(Value::as_str) {
        Some(r) => {
            let name = r.strip_prefix("#/$defs/").expect("local ref");
            resolve(root, &root["$defs"][name])
        }
        None => node,
    }
}

fn fits(root: &Value, alt: &Value, obj: &Map<String, Value>) -> bool {
    let alt = resolve(root, alt);
    let Some(props) = alt.get("properties").and_then(Value::as_object) else { return false };
    if !obj.keys().all(|k| props.contains_key(k)) {
        return false;
    }
    match props.get("kind").and_then(|k| k.get("const")) {
        Some(c) => obj.get("kind") == Some(c),
        None => true,
    }
}

fn check(root: &Value, node: &Value, value: &Value, path: &str, defaults: bool) {
    let node = resolve(root, node);
    if let Some(alts) = node.get("oneOf").and_then(Value::as_array) {
        if let Value::Object(obj) = value {
            let hits: Vec<&Value> = alts.iter().filter(|a| fits(root, a, obj)).collect();
            assert_eq!(hits.len(), 1, "{path}: {} schema alternatives fit {value}", hits.len());
            return check(root, hits[0], value, path, defaults);
        }
        return;
    }
    if defaults {
        if let Some(d) = node.get("default") {
            assert_eq!(d, value, "{path}: schema default differs from code default");
        }
    }
    if let Some(options) = node.get("enum").and_then(Value::as_array) {
        assert!(options.contains(value), "{path}: {value} missing from schema enum");
    }
    if let Some(c) = node.get("const") {
        assert_eq!(c, value, "{path}");
    }
    match value {
        Value::Object(obj) => {
            assert_eq!(node["additionalProperties"], json!(false), "{path}: schema must reject unknown keys");
            let props = node["properties"].as_object().unwrap_or_else(|| panic!("{path}: no properties"));
            for key in obj.keys() {
                assert!(props.contains_key(key), "{path}.{key} missing from schema");
            }
            for key in props.keys() {
                // Never serialized.
                if path.is_empty() && key == "output_dir" {
                    continue;
                }
                assert!(obj.contains_key(key), "{path}.{key} in schema but not serialized");
            }
            for (key, v) in obj {
                check(root, &props[key], v, &format!("{path}.{key}"), defaults);
            }
        }
        Value::Array(items) => {
            if let Some(item) = node.get("items") {
                for (i, v) in items.iter().enumerate() {
                    check(root, item, v, &format!("{path}[{i}]"), false);
                }
            }
        }
        _ => {}
    }
}

fn to_value(c: &ExperimentConfig) -> Value {
    serde_json::from_str(&c.resolved_json()).unwrap()
}

#[test]
fn default_config_matches_schema() {
    let root = schema();
    check(&root, &root, &to_value(&ExperimentConfig::default()), "", true);
}

#[test]
fn every_learner_matches_schema() {
    let root = schema();
    for learner in [
        Learner::Reptile(Default::default()),
        Learner::Maml(Default::default()),
        Learner::Protonet(Default::default()),
        Learner::NonEpisodic(Default::default()),
    ] {
        let mut c = ExperimentConfig::default();
        c.train.learner = learner;
        check(&root, &root, &to_value(&c), "", true);
    }
}

#[test]
fn variant_configs_match_schema() {
    let root = schema();
    let mut c = ExperimentConfig::default();
    c.data.source = DataSource::Files { paths: vec!["a.jsonl".into()], labels: Some("labels.txt".into()) };
    c.queue.temperature = Temperature::Infinite;
    c.data.target_task = Some("nli".into());
    c.data.target_train_per_label = Some(8);
    check(&root, &root, &to_value(&c), "", false);
}

#[test]
fn schema_properties_are_all_deserializable() {
    // Every documented default, written out explicitly, is accepted.
    let root = schema();
    let text = ExperimentConfig::default().resolved_json();
    assert!(ExperimentConfig::from_json(&text).is_ok());
    assert!(root["properties"]["output_dir"].is_object());
    let with_dir = text.replacen('{', "{\n  \"output_dir\": \"runs/x\",", 1);
    assert_eq!(ExperimentConfig::from_json(&with_dir).unwrap().output_dir, Some("runs/x".into()));
}
