//! Dataset files.
//!
//! A data directory holds `catalog.json` and one `domain-<m>.jsonl` per
//! domain. Each `.jsonl` file starts with a header line
//! `{"format":"xcross-dataset","version":1,"generator_hash":…,"seed":…,"domain":…}`
//! followed by one instance per line:
//! `{"user":…,"domain":…,"history":[…],"positive":…,"negatives":[…],"split":"train"|"valid"|"test"}`.
//! Unknown fields are rejected.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Catalog, GeneratedData, GeneratorConfig, Item, MultipleChoiceInstance, Vocab};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "xcross-dataset";
pub const CATALOG_FORMAT: &str = "xcross-catalog";
pub const DATASET_VERSION: u32 = 1;
pub const CATALOG_FILE: &str = "catalog.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub generator_hash: String,
    pub seed: u64,
    pub domain: u16,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogFile {
    format: String,
    version: u32,
    generator_hash: String,
    config: GeneratorConfig,
    transitions: Vec<Vec<Vec<f64>>>,
    vocab: Vocab,
    items: Vec<Item>,
}

pub fn domain_file(dir: &Path, domain: u16) -> PathBuf {
    dir.join(format!("domain-{domain}.jsonl"))
}

fn check_version(format: &str, want_format: &str, version: u32) -> Result<()> {
    if format != want_format {
        return Err(Error::Schema(format!("expected format `{want_format}`, found `{format}`")));
    }
    if version != DATASET_VERSION {
        return Err(Error::Schema(format!(
            "schema version {version} is not supported (expected {DATASET_VERSION})"
        )));
    }
    Ok(())
}

pub fn write_dataset(path: &Path, header: &DatasetHeader, instances: &[MultipleChoiceInstance]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for inst in instances {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset file. An empty file yields no header and no instances.
pub fn read_dataset(path: &Path) -> Result<(Option<DatasetHeader>, Vec<MultipleChoiceInstance>)> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    let mut header = None;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            let h: DatasetHeader = parse_line(&line, lineno)?;
            check_version(&h.format, DATASET_FORMAT, h.version)?;
            header = Some(h);
            continue;
        }
        out.push(parse_line(&line, lineno)?);
    }
    Ok((header, out))
}

fn parse_line<T: for<'de> Deserialize<'de>>(line: &str, lineno: usize) -> Result<T> {
    serde_json::from_str(line).map_err(|e| {
        if e.is_data() && e.to_string().contains("unknown field") {
            Error::Schema(format!("line {lineno}: {e}"))
        } else {
            Error::Parse {
                line: lineno,
                message: e.to_string(),
            }
        }
    })
}

pub fn write_catalog(dir: &Path, data: &GeneratedData, config: &GeneratorConfig) -> Result<()> {
    let file = CatalogFile {
        format: CATALOG_FORMAT.into(),
        version: DATASET_VERSION,
        generator_hash: config.hash(),
        config: config.clone(),
        transitions: data.transitions.clone(),
        vocab: data.catalog.vocab().clone(),
        items: data.catalog.items().to_vec(),
    };
    let mut w = BufWriter::new(fs::File::create(dir.join(CATALOG_FILE))?);
    serde_json::to_writer(&mut w, &file)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Catalog, the generator configuration it came from, and its hash.
pub fn read_catalog(dir: &Path) -> Result<(Catalog, GeneratorConfig, String)> {
    let file = load_catalog_file(dir)?;
    let catalog = Catalog::new(file.vocab, file.items)?;
    Ok((catalog, file.config, file.generator_hash))
}

fn load_catalog_file(dir: &Path) -> Result<CatalogFile> {
    let path = dir.join(CATALOG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    let file: CatalogFile = parse_line(&text, 1)?;
    check_version(&file.format, CATALOG_FORMAT, file.version)?;
    if file.generator_hash != file.config.hash() {
        return Err(Error::Hash("catalog generator config".into()));
    }
    Ok(file)
}

/// Writes the catalog and every domain file into `dir`.
pub fn write_generated(dir: &Path, data: &GeneratedData, config: &GeneratorConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_catalog(dir, data, config)?;
    let hash = config.hash();
    for (m, instances) in data.instances.iter().enumerate() {
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            generator_hash: hash.clone(),
            seed: config.seed,
            domain: m as u16,
        };
        write_dataset(&domain_file(dir, m as u16), &header, instances)?;
    }
    Ok(())
}

/// Reads a directory written by [`write_generated`]. Every domain file must
/// carry the catalog's generator hash.
pub fn read_generated(dir: &Path) -> Result<(GeneratedData, GeneratorConfig)> {
    let file = load_catalog_file(dir)?;
    let catalog = Catalog::new(file.vocab, file.items)?;
    let mut instances = Vec::with_capacity(file.config.domains);
    for m in 0..file.config.domains as u16 {
        let path = domain_file(dir, m);
        let (header, data) = read_dataset(&path)?;
        let header = header.ok_or_else(|| Error::Schema(format!("{} is empty", path.display())))?;
        if header.generator_hash != file.generator_hash || header.domain != m {
            return Err(Error::Hash(format!("{} does not belong to this catalog", path.display())));
        }
        for inst in &data {
            inst.validate(file.config.negatives)?;
        }
        instances.push(data);
    }
    let data = GeneratedData {
        catalog,
        transitions: file.transitions,
        instances,
    };
    Ok((data, file.config))
}
