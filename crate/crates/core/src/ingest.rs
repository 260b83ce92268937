//! Streaming MEDLINE/PubMed baseline parser.
//!
//! Records are pulled one `MedlineCitation` at a time from an event reader;
//! nothing beyond the current citation is held in memory apart from the set
//! of PMIDs already emitted.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use quick_xml::events::Event;
use quick_xml::Reader;
use serde::{Deserialize, Serialize};

use crate::text;

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// One PubMed record with abstract text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Abstract {
    pub pmid: String,
    pub title: String,
    pub body: String,
    pub token_count: usize,
    #[serde(skip)]
    pub source_file: String,
}

impl Abstract {
    pub fn new(pmid: impl Into<String>, title: impl Into<String>, body: impl Into<String>) -> Self {
        let body = body.into();
        Abstract {
            pmid: pmid.into(),
            title: title.into(),
            token_count: text::token_count(&body),
            body,
            source_file: String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub records_seen: u64,
    pub records_emitted: u64,
    pub records_skipped_no_abstract: u64,
    pub records_malformed: u64,
}

impl IngestStats {
    pub fn reconciles(&self) -> bool {
        self.records_seen
            == self.records_emitted + self.records_skipped_no_abstract + self.records_malformed
    }

    pub fn merge(&mut self, other: &IngestStats) {
        self.records_seen += other.records_seen;
        self.records_emitted += other.records_emitted;
        self.records_skipped_no_abstract += other.records_skipped_no_abstract;
        self.records_malformed += other.records_malformed;
    }
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot open {path}: {source}")]
    Open {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("unreadable gzip stream in {path}: {source}")]
    Compression {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed XML at byte {position}: {message}")]
    Xml { position: u64, message: String },
}

/// Opens a MEDLINE file, transparently decompressing gzip content
/// (detected by magic bytes, not by extension).
pub fn open_source(path: &Path) -> Result<Box<dyn BufRead + Send>, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Open {
        path: path.to_owned(),
        source,
    })?;
    let mut reader = BufReader::new(file);
    let head = reader.fill_buf().map_err(|source| IngestError::Open {
        path: path.to_owned(),
        source,
    })?;
    if head.len() >= 2 && head[..2] == GZIP_MAGIC {
        let mut decoded = BufReader::new(MultiGzDecoder::new(reader));
        // Forces header parsing so a broken header fails here, not mid-parse.
        decoded
            .fill_buf()
            .map_err(|source| IngestError::Compression {
                path: path.to_owned(),
                source,
            })?;
        Ok(Box::new(decoded))
    } else {
        Ok(Box::new(reader))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Pmid,
    Title,
    AbstractText,
}

#[derive(Default)]
struct Citation {
    pmid: Option<String>,
    title: String,
    segments: Vec<String>,
    has_abstract: bool,
    invalid_utf8: bool,
}

/// Pull parser yielding one [`Abstract`] per citation with abstract text.
///
/// Iteration stops after the first XML error, which is yielded once.
pub struct MedlineParser<R: BufRead> {
    reader: Reader<R>,
    buf: Vec<u8>,
    source_file: String,
    stats: IngestStats,
    seen_pmids: HashSet<String>,
    // element path relative to the current MedlineCitation (empty when outside)
    path: Vec<Vec<u8>>,
    in_citation: bool,
    capture: Option<(Field, usize)>,
    capture_buf: String,
    current: Citation,
    done: bool,
}

impl<R: BufRead> MedlineParser<R> {
    pub fn new(input: R) -> Self {
        Self::with_source_name(input, "")
    }

    pub fn with_source_name(input: R, source_file: impl Into<String>) -> Self {
        let mut reader = Reader::from_reader(input);
        reader.config_mut().trim_text(false);
        MedlineParser {
            reader,
            buf: Vec::with_capacity(8 * 1024),
            source_file: source_file.into(),
            stats: IngestStats::default(),
            seen_pmids: HashSet::new(),
            path: Vec::new(),
            in_citation: false,
            capture: None,
            capture_buf: String::new(),
            current: Citation::default(),
            done: false,
        }
    }

    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    fn xml_error(&self, message: impl Into<String>) -> IngestError {
        IngestError::Xml {
            position: self.reader.error_position(),
            message: message.into(),
        }
    }

    fn capture_target(&self) -> Option<Field> {
        let names: Vec<&[u8]> = self.path.iter().map(Vec::as_slice).collect();
        match names.as_slice() {
            [b"PMID"] => Some(Field::Pmid),
            [b"Article", b"ArticleTitle"] => Some(Field::Title),
            [b"Article", b"Abstract", b"AbstractText"] => Some(Field::AbstractText),
            _ => None,
        }
    }

    fn push_text(&mut self, raw: &[u8], escaped: bool) -> Result<(), IngestError> {
        if self.capture.is_none() {
            return Ok(());
        }
        let Ok(s) = std::str::from_utf8(raw) else {
            self.current.invalid_utf8 = true;
            return Ok(());
        };
        if escaped {
            let unescaped = quick_xml::escape::unescape(s)
                .map_err(|e| self.xml_error(format!("bad entity: {e}")))?;
            self.capture_buf.push_str(&unescaped);
        } else {
            self.capture_buf.push_str(s);
        }
        Ok(())
    }

    fn finish_capture(&mut self, field: Field) {
        let value = std::mem::take(&mut self.capture_buf);
        let value = value.trim();
        match field {
            Field::Pmid => {
                if self.current.pmid.is_none() {
                    self.current.pmid = Some(value.to_owned());
                }
            }
            Field::Title => self.current.title = value.to_owned(),
            Field::AbstractText => {
                if !value.is_empty() {
                    self.current.segments.push(value.to_owned());
                }
            }
        }
    }

    fn finish_citation(&mut self) -> Option<Abstract> {
        let citation = std::mem::take(&mut self.current);
        self.stats.records_seen += 1;
        let pmid = match citation.pmid {
            Some(p) if !p.is_empty() && !citation.invalid_utf8 => p,
            _ => {
                self.stats.records_malformed += 1;
                return None;
            }
        };
        if !citation.has_abstract || citation.segments.is_empty() {
            self.stats.records_skipped_no_abstract += 1;
            return None;
        }
        if !self.seen_pmids.insert(pmid.clone()) {
            // a repeated PMID would break output uniqueness; first occurrence wins
            self.stats.records_malformed += 1;
            return None;
        }
        let body = citation.segments.join(" ");
        self.stats.records_emitted += 1;
        Some(Abstract {
            pmid,
            title: citation.title,
            token_count: text::token_count(&body),
            body,
            source_file: self.source_file.clone(),
        })
    }

    fn step(&mut self) -> Result<Option<Abstract>, IngestError> {
        loop {
            self.buf.clear();
            let event = self
                .reader
                .read_event_into(&mut self.buf)
                .map_err(|e| IngestError::Xml {
                    position: self.reader.error_position(),
                    message: e.to_string(),
                })?;
            match event {
                Event::Start(e) => {
                    let name = e.name().as_ref().to_vec();
                    if !self.in_citation {
                        if name == b"MedlineCitation" {
                            self.in_citation = true;
                            self.current = Citation::default();
                        }
                        continue;
                    }
                    self.path.push(name);
                    if self.path.len() == 2 && self.path[0] == b"Article" && self.path[1] == b"Abstract" {
                        self.current.has_abstract = true;
                    }
                    if self.capture.is_none() {
                        if let Some(field) = self.capture_target() {
                            self.capture = Some((field, self.path.len()));
                            self.capture_buf.clear();
                        }
                    }
                }
                Event::Empty(e) => {
                    if self.in_citation
                        && self.path.len() == 1
                        && self.path[0] == b"Article"
                        && e.name().as_ref() == b"Abstract"
                    {
                        self.current.has_abstract = true;
                    }
                }
                Event::End(e) => {
                    if !self.in_citation {
                        continue;
                    }
                    if self.path.is_empty() {
                        if e.name().as_ref() == b"MedlineCitation" {
                            self.in_citation = false;
                            if let Some(record) = self.finish_citation() {
                                return Ok(Some(record));
                            }
                        }
                        continue;
                    }
                    if let Some((field, depth)) = self.capture {
                        if depth == self.path.len() {
                            self.capture = None;
                            self.finish_capture(field);
                        }
                    }
                    self.path.pop();
                }
                Event::Text(t) => {
                    let raw = t.into_inner().into_owned();
                    self.push_text(&raw, true)?;
                }
                Event::CData(t) => {
                    let raw = t.into_inner().into_owned();
                    self.push_text(&raw, false)?;
                }
                Event::Eof => {
                    if self.in_citation {
                        return Err(self.xml_error("unexpected end of input inside MedlineCitation"));
                    }
                    return Ok(None);
                }
                _ => {}
            }
        }
    }
}

impl<R: BufRead> Iterator for MedlineParser<R> {
    type Item = Result<Abstract, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.step() {
            Ok(Some(record)) => Some(Ok(record)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Parses a whole stream, collecting records and final stats.
pub fn parse_medline_stream<R: BufRead>(
    input: R,
) -> Result<(Vec<Abstract>, IngestStats), IngestError> {
    let mut parser = MedlineParser::new(input);
    let records = parser.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok((records, parser.stats()))
}

/// Convenience: [`open_source`] + [`MedlineParser`] over a path.
pub fn parse_file(path: &Path) -> Result<MedlineParser<Box<dyn BufRead + Send>>, IngestError> {
    let stream = open_source(path)?;
    Ok(MedlineParser::with_source_name(
        stream,
        path.display().to_string(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wrap(citations: &str) -> String {
        format!("<?xml version=\"1.0\"?>\n<PubmedArticleSet>{citations}</PubmedArticleSet>")
    }

    fn citation(pmid: &str, title: &str, abstract_xml: &str) -> String {
        format!(
            "<PubmedArticle><MedlineCitation Status=\"MEDLINE\"><PMID Version=\"1\">{pmid}</PMID>\
             <Article><ArticleTitle>{title}</ArticleTitle>{abstract_xml}</Article>\
             </MedlineCitation></PubmedArticle>"
        )
    }

    #[test]
    fn minimal_citation() {
        let xml = wrap(&citation("1", "T", "<Abstract><AbstractText>a b c</AbstractText></Abstract>"));
        let (records, stats) = parse_medline_stream(xml.as_bytes()).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].pmid, "1");
        assert_eq!(records[0].title, "T");
        assert_eq!(records[0].body, "a b c");
        assert_eq!(records[0].token_count, 3);
        assert_eq!(stats.records_emitted, 1);
        assert!(stats.reconciles());
    }

    #[test]
    fn missing_abstract_is_skipped() {
        let xml = wrap(&format!(
            "{}{}",
            citation("1", "T", "<Abstract><AbstractText>x</AbstractText></Abstract>"),
            citation("2", "U", "")
        ));
        let (records, stats) = parse_medline_stream(xml.as_bytes()).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(stats.records_skipped_no_abstract, 1);
        assert_eq!(stats.records_seen, 2);
    }

    #[test]
    fn empty_abstract_element_counts_as_skipped() {
        let xml = wrap(&format!(
            "{}{}",
            citation("1", "T", "<Abstract/>"),
            citation("2", "T", "<Abstract><AbstractText>  </AbstractText></Abstract>")
        ));
        let (records, stats) = parse_medline_stream(xml.as_bytes()).unwrap();
        assert!(records.is_empty());
        assert_eq!(stats.records_skipped_no_abstract, 2);
    }

    #[test]
    fn missing_pmid_is_malformed() {
        let xml = wrap(
            "<PubmedArticle><MedlineCitation><Article><ArticleTitle>T</ArticleTitle>\
             <Abstract><AbstractText>a</AbstractText></Abstract></Article></MedlineCitation></PubmedArticle>",
        );
        let (records, stats) = parse_medline_stream(xml.as_bytes()).unwrap();
        assert!(records.is_empty());
        assert_eq!(stats.records_malformed, 1);
        assert!(stats.reconciles());
    }

    #[test]
    fn nested_pmids_do_not_override_citation_pmid() {
        let xml = wrap(
            "<PubmedArticle><MedlineCitation><PMID>7</PMID><Article><ArticleTitle>T</ArticleTitle>\
             <Abstract><AbstractText>a</AbstractText></Abstract></Article>\
             <CommentsCorrectionsList><CommentsCorrections><PMID>99</PMID></CommentsCorrections>\
             </CommentsCorrectionsList></MedlineCitation></PubmedArticle>",
        );
        let (records, _) = parse_medline_stream(xml.as_bytes()).unwrap();
        assert_eq!(records[0].pmid, "7");
    }

    #[test]
    fn inline_markup_entities_and_labels() {
        let xml = wrap(&citation(
            "3",
            "CO<sub>2</sub> &amp; you",
            "<Abstract><AbstractText Label=\"BACKGROUND\">x<sup>2</sup> &lt; y</AbstractText>\
             <AbstractText Label=\"RESULTS\"><![CDATA[z & w]]></AbstractText></Abstract>",
        ));
        let (records, _) = parse_medline_stream(xml.as_bytes()).unwrap();
        assert_eq!(records[0].title, "CO2 & you");
        assert_eq!(records[0].body, "x2 < y z & w");
    }

    #[test]
    fn other_abstract_is_ignored() {
        let xml = wrap(
            "<PubmedArticle><MedlineCitation><PMID>5</PMID><Article><ArticleTitle>T</ArticleTitle>\
             <Abstract><AbstractText>en</AbstractText></Abstract></Article>\
             <OtherAbstract><AbstractText>autre</AbstractText></OtherAbstract>\
             </MedlineCitation></PubmedArticle>",
        );
        let (records, _) = parse_medline_stream(xml.as_bytes()).unwrap();
        assert_eq!(records[0].body, "en");
    }

    #[test]
    fn duplicate_pmid_is_not_emitted_twice() {
        let one = citation("1", "T", "<Abstract><AbstractText>a</AbstractText></Abstract>");
        let xml = wrap(&format!("{one}{one}"));
        let (records, stats) = parse_medline_stream(xml.as_bytes()).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(stats.records_malformed, 1);
        assert!(stats.reconciles());
    }

    #[test]
    fn malformed_xml_reports_position() {
        let xml = "<PubmedArticleSet><PubmedArticle><MedlineCitation><PMID>1</PMID>\
                   <Article></Wrong></MedlineCitation></PubmedArticle></PubmedArticleSet>";
        let err = parse_medline_stream(xml.as_bytes()).unwrap_err();
        match err {
            IngestError::Xml { position, .. } => assert!(position > 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_input_is_an_error() {
        let xml = "<PubmedArticleSet><PubmedArticle><MedlineCitation><PMID>1</PMID>";
        assert!(parse_medline_stream(xml.as_bytes()).is_err());
    }

    #[test]
    fn invalid_utf8_marks_record_malformed() {
        let mut xml = wrap(&citation("1", "T", "<Abstract><AbstractText>BAD</AbstractText></Abstract>"))
            .into_bytes();
        let at = xml.windows(3).position(|w| w == b"BAD").unwrap();
        xml[at] = 0xff;
        let (records, stats) = parse_medline_stream(xml.as_slice()).unwrap();
        assert!(records.is_empty());
        assert_eq!(stats.records_malformed, 1);
    }
}
