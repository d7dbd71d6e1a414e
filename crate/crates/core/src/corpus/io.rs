//! Line-delimited JSON corpus files.
//!
//! Each file starts with a header record naming the format; every following
//! line holds one catalog item or one user sequence.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_sorted, Catalog, Corpus, Interaction, InteractionSequence, ItemRecord, Window};
use crate::error::{GuimError, Result};

pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const SEQUENCES_FILE: &str = "sequences.jsonl";

const CATALOG_FORMAT: &str = "guim-catalog";
const SEQUENCES_FORMAT: &str = "guim-sequences";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogHeader {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequencesHeader {
    format: String,
    version: u32,
    window_days: [u32; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceRecord {
    user_id: u64,
    cutoff_ts: i64,
    interactions: Vec<Interaction>,
}

fn to_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("corpus records always serialize")
}

pub fn write_catalog<W: Write>(mut w: W, items: &[ItemRecord]) -> Result<()> {
    let header = CatalogHeader {
        format: CATALOG_FORMAT.into(),
        version: FORMAT_VERSION,
    };
    writeln!(w, "{}", to_line(&header))?;
    for it in items {
        writeln!(w, "{}", to_line(it))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes sequences sharing one window. A window defaults to 365/30 days when
/// the slice is empty.
pub fn write_sequences<W: Write>(mut w: W, sequences: &[InteractionSequence]) -> Result<()> {
    let window = sequences.first().map_or_else(Window::default, |s| s.window);
    if let Some(s) = sequences.iter().find(|s| s.window != window) {
        return Err(GuimError::Config(format!(
            "user {} has window {:?}, file window is {:?}",
            s.user_id, s.window, window
        )));
    }
    let header = SequencesHeader {
        format: SEQUENCES_FORMAT.into(),
        version: FORMAT_VERSION,
        window_days: [window.pre_days, window.post_days],
    };
    writeln!(w, "{}", to_line(&header))?;
    for s in sequences {
        let rec = SequenceRecord {
            user_id: s.user_id,
            cutoff_ts: s.cutoff,
            interactions: s.interactions.clone(),
        };
        writeln!(w, "{}", to_line(&rec))?;
    }
    w.flush()?;
    Ok(())
}

fn parse_err(line: usize, e: impl std::fmt::Display) -> GuimError {
    GuimError::Parse {
        line,
        message: e.to_string(),
    }
}

/// Returns `(line_number, text)` for every non-empty line, 1-based.
fn numbered_lines<R: BufRead>(r: R) -> impl Iterator<Item = Result<(usize, String)>> {
    r.lines().enumerate().filter_map(|(i, line)| match line {
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(Ok((i + 1, l))),
        Err(e) => Some(Err(GuimError::Io(e))),
    })
}

fn check_format(line: usize, found: &str, want: &str, version: u32) -> Result<()> {
    if found != want {
        return Err(parse_err(line, format!("expected format `{want}`, found `{found}`")));
    }
    if version != FORMAT_VERSION {
        return Err(parse_err(line, format!("unsupported version {version}")));
    }
    Ok(())
}

pub fn read_catalog<R: BufRead>(r: R) -> Result<Vec<ItemRecord>> {
    let mut lines = numbered_lines(r);
    let (n, first) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header record"))??;
    let header: CatalogHeader = serde_json::from_str(&first).map_err(|e| parse_err(n, e))?;
    check_format(n, &header.format, CATALOG_FORMAT, header.version)?;
    let mut items = Vec::new();
    for line in lines {
        let (n, text) = line?;
        items.push(serde_json::from_str(&text).map_err(|e| parse_err(n, e))?);
    }
    Ok(items)
}

pub fn read_sequences<R: BufRead>(r: R) -> Result<Vec<InteractionSequence>> {
    let mut lines = numbered_lines(r);
    let (n, first) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header record"))??;
    let header: SequencesHeader = serde_json::from_str(&first).map_err(|e| parse_err(n, e))?;
    check_format(n, &header.format, SEQUENCES_FORMAT, header.version)?;
    let window = Window::new(header.window_days[0], header.window_days[1]);
    let mut out = Vec::new();
    for line in lines {
        let (n, text) = line?;
        let rec: SequenceRecord = serde_json::from_str(&text).map_err(|e| parse_err(n, e))?;
        check_sorted(&rec.interactions).map_err(|e| parse_err(n, e))?;
        out.push(InteractionSequence {
            user_id: rec.user_id,
            interactions: rec.interactions,
            cutoff: rec.cutoff_ts,
            window,
        });
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| GuimError::file(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| GuimError::file(path, e))
}

pub fn save_catalog(path: impl AsRef<Path>, items: &[ItemRecord]) -> Result<()> {
    write_catalog(create(path.as_ref())?, items)
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<Vec<ItemRecord>> {
    read_catalog(open(path.as_ref())?)
}

pub fn save_sequences(path: impl AsRef<Path>, sequences: &[InteractionSequence]) -> Result<()> {
    write_sequences(create(path.as_ref())?, sequences)
}

pub fn load_sequences(path: impl AsRef<Path>) -> Result<Vec<InteractionSequence>> {
    read_sequences(open(path.as_ref())?)
}

/// Writes `catalog.jsonl` and `sequences.jsonl` into `dir`.
pub fn save_corpus(dir: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| GuimError::file(dir, e))?;
    save_catalog(dir.join(CATALOG_FILE), corpus.catalog.items())?;
    save_sequences(dir.join(SEQUENCES_FILE), &corpus.sequences)
}

pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let catalog = Catalog::new(load_catalog(dir.join(CATALOG_FILE))?)?;
    let sequences = load_sequences(dir.join(SEQUENCES_FILE))?;
    Ok(Corpus { catalog, sequences })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_users() -> (Vec<ItemRecord>, Vec<InteractionSequence>) {
        let items = vec![
            ItemRecord { item_id: 0, category_id: 2, title_tokens: vec![1, 4] },
            ItemRecord { item_id: 7, category_id: 0, title_tokens: vec![] },
        ];
        let seqs = (0..3)
            .map(|u| InteractionSequence {
                user_id: u,
                interactions: vec![
                    Interaction { item_id: 0, timestamp: 100 + u as i64 },
                    Interaction { item_id: 7, timestamp: 900 },
                ],
                cutoff: 500,
                window: Window::new(10, 2),
            })
            .collect();
        (items, seqs)
    }

    #[test]
    fn empty_corpus_is_header_only() {
        let mut buf = Vec::new();
        write_catalog(&mut buf, &[]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(read_catalog(&buf[..]).unwrap().is_empty());

        let mut buf = Vec::new();
        write_sequences(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 1);
        assert!(read_sequences(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn three_user_round_trip() {
        let (items, seqs) = three_users();
        let mut a = Vec::new();
        write_catalog(&mut a, &items).unwrap();
        let mut b = Vec::new();
        write_sequences(&mut b, &seqs).unwrap();
        assert_eq!(read_catalog(&a[..]).unwrap(), items);
        assert_eq!(read_sequences(&b[..]).unwrap(), seqs);
    }

    #[test]
    fn missing_category_is_reported_with_line_and_field() {
        let text = "{\"format\":\"guim-catalog\",\"version\":1}\n\
                    {\"item_id\":1,\"category_id\":0,\"title_tokens\":[]}\n\
                    {\"item_id\":2,\"title_tokens\":[3]}\n";
        match read_catalog(text.as_bytes()) {
            Err(GuimError::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("category_id"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_header_is_rejected() {
        let text = "{\"format\":\"guim-sequences\",\"version\":1,\"window_days\":[1,1]}\n";
        assert!(matches!(read_catalog(text.as_bytes()), Err(GuimError::Parse { line: 1, .. })));
    }

    #[test]
    fn unsorted_sequence_record_is_rejected() {
        let text = "{\"format\":\"guim-sequences\",\"version\":1,\"window_days\":[1,1]}\n\
                    {\"user_id\":1,\"cutoff_ts\":5,\"interactions\":[{\"item_id\":1,\"ts\":9},{\"item_id\":1,\"ts\":3}]}\n";
        assert!(matches!(read_sequences(text.as_bytes()), Err(GuimError::Parse { line: 2, .. })));
    }
}
