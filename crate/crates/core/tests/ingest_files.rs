use std::io::{Read, Write};

use flate2::write::GzEncoder;
use flate2::Compression;
use proptest::prelude::*;
use vipubmed_core::ingest::{open_source, parse_file, parse_medline_stream, Abstract, IngestError};

const FIXTURE: &str = r#"<?xml version="1.0" encoding="UTF-8"?>
<PubmedArticleSet>
  <PubmedArticle>
    <MedlineCitation Status="MEDLINE">
      <PMID Version="1">31000001</PMID>
      <Article>
        <ArticleTitle>Outcomes of fever management</ArticleTitle>
        <Abstract>
          <AbstractText Label="BACKGROUND" NlmCategory="BACKGROUND">Background.</AbstractText>
          <AbstractText Label="RESULTS" NlmCategory="RESULTS">Results.</AbstractText>
        </Abstract>
      </Article>
    </MedlineCitation>
  </PubmedArticle>
  <PubmedArticle>
    <MedlineCitation>
      <PMID>31000002</PMID>
      <Article>
        <ArticleTitle>Letter without abstract</ArticleTitle>
      </Article>
    </MedlineCitation>
  </PubmedArticle>
  <PubmedArticle>
    <MedlineCitation>
      <PMID>31000003</PMID>
      <Article>
        <ArticleTitle>Plain</ArticleTitle>
        <Abstract><AbstractText>Patients   with sepsis
          were enrolled.</AbstractText></Abstract>
      </Article>
    </MedlineCitation>
  </PubmedArticle>
</PubmedArticleSet>
"#;

/// Deliberately naive tree builder used as an independent oracle: no
/// streaming, no entity handling (the fixture has none).
#[derive(Debug)]
struct Node {
    name: String,
    children: Vec<Node>,
    text: String,
}

fn build_tree(xml: &str) -> Node {
    let mut stack = vec![Node {
        name: "#root".into(),
        children: vec![],
        text: String::new(),
    }];
    let mut rest = xml;
    while let Some(lt) = rest.find('<') {
        stack.last_mut().unwrap().text.push_str(&rest[..lt]);
        let gt = rest[lt..].find('>').unwrap() + lt;
        let tag = &rest[lt + 1..gt];
        rest = &rest[gt + 1..];
        if tag.starts_with('?') || tag.starts_with('!') {
            continue;
        }
        if let Some(name) = tag.strip_prefix('/') {
            let node = stack.pop().unwrap();
            assert_eq!(node.name, name.trim());
            stack.last_mut().unwrap().children.push(node);
        } else {
            let self_closing = tag.ends_with('/');
            let name = tag.trim_end_matches('/').split_whitespace().next().unwrap().to_string();
            let node = Node {
                name,
                children: vec![],
                text: String::new(),
            };
            if self_closing {
                stack.last_mut().unwrap().children.push(node);
            } else {
                stack.push(node);
            }
        }
    }
    assert_eq!(stack.len(), 1);
    stack.pop().unwrap()
}

fn find_all<'a>(node: &'a Node, name: &str, out: &mut Vec<&'a Node>) {
    for c in &node.children {
        if c.name == name {
            out.push(c);
        } else {
            find_all(c, name, out);
        }
    }
}

fn child<'a>(node: &'a Node, name: &str) -> Option<&'a Node> {
    node.children.iter().find(|c| c.name == name)
}

fn oracle(xml: &str) -> Vec<(String, String, String)> {
    let root = build_tree(xml);
    let mut citations = Vec::new();
    find_all(&root, "MedlineCitation", &mut citations);
    citations
        .into_iter()
        .filter_map(|c| {
            let pmid = child(c, "PMID")?.text.trim().to_string();
            let article = child(c, "Article")?;
            let title = child(article, "ArticleTitle").map(|t| t.text.trim().to_string()).unwrap_or_default();
            let abs = child(article, "Abstract")?;
            let parts: Vec<String> = abs
                .children
                .iter()
                .filter(|n| n.name == "AbstractText")
                .map(|n| n.text.trim().to_string())
                .filter(|t| !t.is_empty())
                .collect();
            (!parts.is_empty()).then(|| (pmid, title, parts.join(" ")))
        })
        .collect()
}

fn triples(records: &[Abstract]) -> Vec<(String, String, String)> {
    records
        .iter()
        .map(|a| (a.pmid.clone(), a.title.clone(), a.body.clone()))
        .collect()
}

#[test]
fn parser_agrees_with_tree_walk() {
    let (records, stats) = parse_medline_stream(FIXTURE.as_bytes()).unwrap();
    assert_eq!(triples(&records), oracle(FIXTURE));
    assert_eq!(records[0].body, "Background. Results.");
    assert_eq!(stats.records_seen, 3);
    assert_eq!(stats.records_skipped_no_abstract, 1);
    assert!(stats.reconciles());
}

#[test]
fn gzip_and_plain_files_agree() {
    let dir = tempfile::tempdir().unwrap();
    let plain = dir.path().join("base.xml");
    let gz = dir.path().join("base.xml.gz");
    std::fs::write(&plain, FIXTURE).unwrap();
    let mut enc = GzEncoder::new(std::fs::File::create(&gz).unwrap(), Compression::default());
    enc.write_all(FIXTURE.as_bytes()).unwrap();
    enc.finish().unwrap();

    let mut a = Vec::new();
    open_source(&plain).unwrap().read_to_end(&mut a).unwrap();
    let mut b = Vec::new();
    open_source(&gz).unwrap().read_to_end(&mut b).unwrap();
    assert_eq!(a, FIXTURE.as_bytes());
    assert_eq!(a, b);

    let from_plain: Vec<Abstract> = parse_file(&plain).unwrap().collect::<Result<_, _>>().unwrap();
    let from_gz: Vec<Abstract> = parse_file(&gz).unwrap().collect::<Result<_, _>>().unwrap();
    assert_eq!(triples(&from_plain), triples(&from_gz));
}

#[test]
fn corrupt_gzip_body_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.xml.gz");
    let mut bytes = vec![0x1f, 0x8b, 0x08, 0x00];
    bytes.extend((0u8..200).map(|i| i.wrapping_mul(37)));
    std::fs::write(&path, bytes).unwrap();
    let failed = match open_source(&path) {
        Err(IngestError::Compression { .. }) => true,
        Err(e) => panic!("unexpected error {e}"),
        Ok(stream) => parse_medline_stream(stream).is_err(),
    };
    assert!(failed);
}

#[test]
fn missing_file_is_an_open_error() {
    assert!(matches!(
        open_source(std::path::Path::new("/nonexistent/baseline.xml")),
        Err(IngestError::Open { .. })
    ));
}

#[test]
fn parsing_is_deterministic() {
    let a = parse_medline_stream(FIXTURE.as_bytes()).unwrap();
    let b = parse_medline_stream(FIXTURE.as_bytes()).unwrap();
    assert_eq!(a, b);
}

fn citation(pmid: u32, title: &str, segments: &[String]) -> String {
    let abs = if segments.is_empty() {
        String::new()
    } else {
        let texts: String = segments
            .iter()
            .map(|s| format!("<AbstractText>{s}</AbstractText>"))
            .collect();
        format!("<Abstract>{texts}</Abstract>")
    };
    format!(
        "<PubmedArticle><MedlineCitation><PMID>{pmid}</PMID><Article><ArticleTitle>{title}</ArticleTitle>{abs}</Article></MedlineCitation></PubmedArticle>"
    )
}

fn wrap(inner: &str) -> String {
    format!("<PubmedArticleSet>{inner}</PubmedArticleSet>")
}

proptest! {
    #[test]
    fn concatenation_of_fixtures(
        docs in prop::collection::vec(
            ("[a-z]{1,8}", prop::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,5}", 0..3)),
            1..12,
        )
    ) {
        let pieces: Vec<String> = docs
            .iter()
            .enumerate()
            .map(|(i, (t, segs))| citation(i as u32 + 1, t, segs))
            .collect();
        let mut expected = Vec::new();
        let mut seen = 0;
        for p in &pieces {
            let (recs, stats) = parse_medline_stream(wrap(p).as_bytes()).unwrap();
            seen += stats.records_seen;
            expected.extend(recs);
        }
        let (all, stats) = parse_medline_stream(wrap(&pieces.concat()).as_bytes()).unwrap();
        prop_assert_eq!(all, expected);
        prop_assert_eq!(stats.records_seen, seen);
        prop_assert!(stats.reconciles());
    }
}
