//! Line-delimited JSON shards holding scenes and their triplets.
//!
//! ```text
//! {"kind":"scene","seed":3,"objects":[{"shape":"circle","color":"red","size":"small","cx":0.200000,"cy":0.500000}]}
//! {"kind":"triplet","scene":3,"box":[0.200000,0.500000,0.150000,0.150000],"len":2,"tokens":[4,..]}
//! ```

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use super::triplet::Triplet;
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::world::{BBox, Scene};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetShard {
    pub scenes: Vec<Scene>,
    pub triplets: Vec<Triplet>,
}

impl DatasetShard {
    pub fn scene(&self, seed: u64) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.seed == seed)
    }

    /// Triplets grouped by scene seed, in ascending seed order.
    pub fn by_scene(&self) -> BTreeMap<u64, Vec<&Triplet>> {
        let mut map: BTreeMap<u64, Vec<&Triplet>> = BTreeMap::new();
        for t in &self.triplets {
            map.entry(t.scene).or_default().push(t);
        }
        map
    }

    /// Every triplet references a stored scene and carries the exact box of
    /// one of its objects; every token is in the vocabulary.
    pub fn validate(&self, vocab: &Vocab) -> std::result::Result<(), String> {
        for t in &self.triplets {
            let scene = self
                .scene(t.scene)
                .ok_or_else(|| format!("triplet references unknown scene {}", t.scene))?;
            if !scene.objects.iter().any(|o| o.bbox() == t.bbox) {
                return Err(format!("triplet box {:?} matches no object of scene {}", t.bbox, t.scene));
            }
            t.check(vocab)?;
        }
        Ok(())
    }

    /// Ascending scene seed; each scene's triplets follow it in insertion order.
    fn ordered(&self) -> Vec<(&Scene, Vec<&Triplet>)> {
        let mut scenes: Vec<&Scene> = self.scenes.iter().collect();
        scenes.sort_by_key(|s| s.seed);
        let mut groups = self.by_scene();
        scenes
            .into_iter()
            .map(|s| (s, groups.remove(&s.seed).unwrap_or_default()))
            .collect()
    }
}

fn triplet_line(t: &Triplet) -> String {
    let tokens: Vec<String> = t.tokens.iter().map(|id| id.to_string()).collect();
    format!(
        "{{\"kind\":\"triplet\",\"scene\":{},\"box\":[{:.6},{:.6},{:.6},{:.6}],\"len\":{},\"tokens\":[{}]}}",
        t.scene,
        t.bbox.cx,
        t.bbox.cy,
        t.bbox.w,
        t.bbox.h,
        t.len,
        tokens.join(",")
    )
}

pub fn write_shard(shard: &DatasetShard, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for (scene, triplets) in shard.ordered() {
        writeln!(out, "{{\"kind\":\"scene\",{}}}", scene.json_fields())?;
        for t in triplets {
            writeln!(out, "{}", triplet_line(t))?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct TripletRecord {
    scene: u64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    len: usize,
    tokens: Vec<usize>,
}

fn parse_line(line: &str, vocab: &Vocab, shard: &mut DatasetShard) -> std::result::Result<(), String> {
    let mut value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let kind = value
        .as_object_mut()
        .and_then(|o| o.remove("kind"))
        .and_then(|k| k.as_str().map(String::from))
        .ok_or("record has no `kind`")?;
    match kind.as_str() {
        "scene" => shard.scenes.push(Scene::from_value(value)?),
        "triplet" => {
            let rec: TripletRecord = serde_json::from_value(value).map_err(|e| e.to_string())?;
            let [cx, cy, w, h] = rec.bbox;
            let t = Triplet {
                scene: rec.scene,
                bbox: BBox::new(cx, cy, w, h),
                len: rec.len,
                tokens: rec.tokens,
            };
            t.check(vocab)?;
            shard.triplets.push(t);
        }
        other => return Err(format!("unknown record kind `{other}`")),
    }
    Ok(())
}

pub fn read_shard(path: &Path) -> Result<DatasetShard> {
    let text = std::fs::read_to_string(path)?;
    let vocab = Vocab::standard();
    let mut shard = DatasetShard::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        parse_line(line, &vocab, &mut shard).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
    }
    Ok(shard)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, DatasetConfig};
    use crate::world::{generate_scene, WorldConfig};

    fn small_shard() -> DatasetShard {
        let scenes: Vec<Scene> = (0..5).map(|s| generate_scene(s, &WorldConfig::default()).unwrap()).collect();
        build_dataset(&scenes, &DatasetConfig::default()).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let shard = small_shard();
        write_shard(&shard, &path).unwrap();
        let back = read_shard(&path).unwrap();
        assert_eq!(back, shard);
        back.validate(&Vocab::standard()).unwrap();
    }

    #[test]
    fn empty_shard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        write_shard(&DatasetShard::default(), &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
        assert_eq!(read_shard(&path).unwrap(), DatasetShard::default());
    }

    #[test]
    fn truncated_file_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        write_shard(&small_shard(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines = text.lines().count();
        std::fs::write(&path, &text[..text.len() - 10]).unwrap();
        match read_shard(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, lines),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_tokens_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.jsonl");
        std::fs::write(
            &path,
            "{\"kind\":\"triplet\",\"scene\":0,\"box\":[0.5,0.5,0.1,0.1],\"len\":1,\"tokens\":[3,999,1]}\n",
        )
        .unwrap();
        assert!(matches!(read_shard(&path), Err(Error::Parse { line: 1, .. })));
    }
}
