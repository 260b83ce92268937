#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

pub fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vipubmed"))
}

pub fn vipubmed<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    bin().args(args).output().expect("spawn vipubmed")
}

/// Runs and insists on exit code 0.
pub fn ok<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> String {
    let out = vipubmed(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "vipubmed {:?}\nstdout: {}\nstderr: {}",
        args.iter().map(|a| a.as_ref().to_string_lossy().into_owned()).collect::<Vec<_>>(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

const WORDS: &[&str] = &[
    "patient", "has", "fever", "cough", "pain", "chest", "with", "and", "was", "no", "history", "of", "blood",
    "pressure", "heart", "normal", "study", "in", "the", "cohort", "trial", "dose", "risk", "outcome",
    "randomized", "treatment", "infection", "therapy", "clinical", "significant",
];

/// Deterministic MEDLINE document with `n` citations. Some citations have
/// no abstract, some bodies are longer than 512 tokens and some repeat an
/// earlier body.
pub fn medline_xml(n: usize, start_pmid: usize) -> String {
    let mut state: u64 = 0x2545_F491_4F6C_DD1D ^ start_pmid as u64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    let mut xml = String::from("<?xml version=\"1.0\"?>\n<PubmedArticleSet>\n");
    let mut bodies: Vec<String> = Vec::new();
    for i in 0..n {
        let pmid = start_pmid + i;
        let r = next() % 100;
        let abs = if r == 0 {
            String::new()
        } else {
            let body = if r < 3 && !bodies.is_empty() {
                bodies[(next() as usize) % bodies.len()].clone()
            } else {
                let len = if r < 6 { 513 + (next() % 100) as usize } else { 20 + (next() % 300) as usize };
                let words: Vec<&str> = (0..len).map(|_| WORDS[(next() as usize) % WORDS.len()]).collect();
                words.join(" ")
            };
            bodies.push(body.clone());
            format!("<Abstract><AbstractText>{body}</AbstractText></Abstract>")
        };
        writeln!(
            xml,
            "<PubmedArticle><MedlineCitation><PMID>{pmid}</PMID><Article><ArticleTitle>Study {pmid}</ArticleTitle>{abs}</Article></MedlineCitation></PubmedArticle>"
        )
        .unwrap();
    }
    xml.push_str("</PubmedArticleSet>\n");
    xml
}

/// Gold bitext TSV with `n` pairs across several domains.
pub fn gold_tsv(n: usize) -> String {
    let domains = ["news", "law", "religion", "medical"];
    (0..n)
        .map(|i| format!("gold source {i}\tnguồn vàng {i}\tgold\t{}\n", domains[i % domains.len()]))
        .collect()
}

pub const LABELS: [&str; 3] = ["entailment", "contradiction", "neutral"];

/// 30 MedNLI-style examples: 20 train, 5 dev, 5 test, 10 of each label.
pub fn write_mednli_fixture(dir: &Path) -> BTreeMap<&'static str, Vec<(String, String)>> {
    std::fs::create_dir_all(dir).unwrap();
    let premises = [
        "Patient has no PMH",
        "Electrocardiograms revealed no QRS changes",
        "Patient is post op",
        "Patient has fever and cough",
        "The patient had chest pain",
    ];
    let hypotheses = [
        "Patient has a history of heart disease",
        "Patient has normal blood pressure",
        "Patient has no fever",
    ];
    // label sequence chosen so each label appears 10 times overall
    let plan: [(&str, usize, [usize; 3]); 3] = [
        ("train", 20, [7, 7, 6]),
        ("dev", 5, [2, 1, 2]),
        ("test", 5, [1, 2, 2]),
    ];
    let mut expected = BTreeMap::new();
    let mut k = 0;
    for (split, n, per_label) in plan {
        let mut labels: Vec<&str> = Vec::new();
        for (l, &c) in LABELS.iter().zip(&per_label) {
            labels.extend(std::iter::repeat(*l).take(c));
        }
        assert_eq!(labels.len(), n);
        let mut lines = String::new();
        let mut uids = Vec::new();
        for (j, label) in labels.into_iter().enumerate() {
            let uid = format!("{split}-{j:03}");
            let rec = serde_json::json!({
                "sentence1": format!("{} {k}", premises[k % premises.len()]),
                "sentence2": hypotheses[k % hypotheses.len()],
                "gold_label": label,
                "pairID": uid,
            });
            lines.push_str(&rec.to_string());
            lines.push('\n');
            uids.push((uid, label.to_string()));
            k += 1;
        }
        std::fs::write(dir.join(format!("mli_{split}_v1.jsonl")), lines).unwrap();
        expected.insert(split, uids);
    }
    expected
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Relative path → SHA-256 of every file under `dir`.
pub fn checksums(dir: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, sha256_hex(&std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Runs ingest → filter → translate → selftrain-mix → corrupt into `work`
/// and returns the checksums of everything written there.
pub fn full_chain(work: &Path, xml: &Path, gold: &Path, seed: u64, jobs: usize) -> BTreeMap<String, String> {
    std::fs::create_dir_all(work).unwrap();
    let lexicon = repo_file("data/mock_en_vi.tsv");
    let seed = seed.to_string();
    let jobs = jobs.to_string();
    let g = |rest: &[String]| {
        let mut v = vec!["--seed".to_string(), seed.clone(), "--jobs".to_string(), jobs.clone()];
        v.extend_from_slice(rest);
        v
    };
    let s = |x: &str| x.to_string();
    let w = |name: &str| p(&work.join(name));
    ok(&g(&[s("ingest"), s("--in"), p(xml), s("--out"), w("abstracts.jsonl")]));
    ok(&g(&[
        s("filter"),
        s("--in"),
        w("abstracts.jsonl"),
        s("--out"),
        w("filtered.jsonl"),
        s("--subset"),
        s("8000"),
    ]));
    ok(&g(&[
        s("translate"),
        s("--in"),
        w("filtered.jsonl"),
        s("--out"),
        w("translated.jsonl"),
        s("--lexicon"),
        p(&lexicon),
        s("--with-title"),
    ]));
    ok(&g(&[
        s("selftrain-mix"),
        s("--gold"),
        p(gold),
        s("--mono"),
        w("filtered.jsonl"),
        s("--lexicon"),
        p(&lexicon),
        s("--out-dir"),
        w("mix"),
        s("--shard-size"),
        s("3000"),
    ]));
    ok(&g(&[
        s("corrupt"),
        s("--in"),
        w("translated.jsonl"),
        s("--out-dir"),
        w("corrupt"),
        s("--shard-size"),
        s("2500"),
    ]));
    checksums(work)
}
