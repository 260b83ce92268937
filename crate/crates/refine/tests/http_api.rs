use std::collections::HashSet;
use std::sync::Arc;
use std::thread;

use chrono::{Duration, TimeZone, Utc};
use serde_json::{json, Value};
use vipubmed_core::mednli::{AbbrevAction, AbbrevLexicon, AbbrevRule, Label, NliExample, Split};
use vipubmed_core::refine::{ManualClock, Progress, TaskStore};
use vipubmed_refine::{serve, AppState};

fn examples(n: usize) -> Vec<NliExample> {
    (0..n)
        .map(|i| {
            let mut ex = NliExample::new(format!("p{i}"), "No PMH", "QRS normal", Label::Entailment, Split::Dev);
            ex.set_machine(format!("Không có PMH {i}"), "QRS bình thường".into()).unwrap();
            ex
        })
        .collect()
}

fn lexicon() -> AbbrevLexicon {
    AbbrevLexicon::new(vec![AbbrevRule {
        rule_id: "pmh".into(),
        pattern: "PMH".into(),
        case_sensitive: true,
        action: AbbrevAction::ExpandVietnamese,
        replacement: "tiền sử bệnh".into(),
        notes: "past medical history".into(),
    }])
    .unwrap()
}

struct Server {
    base: String,
    clock: Arc<ManualClock>,
}

fn start(n: usize) -> Server {
    let clock = Arc::new(ManualClock::new(Utc.with_ymd_and_hms(2026, 3, 1, 9, 0, 0).unwrap()));
    let store = TaskStore::in_memory(clock.clone(), Duration::minutes(15));
    store.enqueue(&examples(n), &lexicon()).unwrap();
    let state = Arc::new(AppState { store, lexicon: lexicon() });
    let std_listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    std_listener.set_nonblocking(true).unwrap();
    let addr = std_listener.local_addr().unwrap();
    thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async {
            let listener = tokio::net::TcpListener::from_std(std_listener).unwrap();
            serve(listener, state).await.unwrap();
        });
    });
    Server {
        base: format!("http://{addr}"),
        clock,
    }
}

fn status_of(r: Result<ureq::Response, ureq::Error>) -> (u16, Option<Value>) {
    match r {
        Ok(resp) => {
            let code = resp.status();
            let body = resp.into_string().unwrap();
            (code, serde_json::from_str(&body).ok())
        }
        Err(ureq::Error::Status(code, resp)) => (code, resp.into_json().ok()),
        Err(e) => panic!("transport error: {e}"),
    }
}

impl Server {
    fn next(&self, who: &str) -> (u16, Option<Value>) {
        status_of(ureq::get(&format!("{}/tasks/next", self.base)).query("annotator", who).call())
    }

    fn submit(&self, id: u64, who: &str, text: &str) -> (u16, Option<Value>) {
        status_of(
            ureq::post(&format!("{}/tasks/{id}/submit", self.base))
                .send_json(json!({"annotator": who, "final_text": text})),
        )
    }

    fn progress(&self) -> Progress {
        ureq::get(&format!("{}/progress", self.base)).call().unwrap().into_json().unwrap()
    }
}

#[test]
fn task_payload_has_suggestion_and_hits() {
    let s = start(1);
    let (code, body) = s.next("lan");
    assert_eq!(code, 200);
    let t = body.unwrap();
    assert_eq!(t["task_id"], 1);
    assert_eq!(t["uid"], "p0");
    assert_eq!(t["field"], "premise");
    assert_eq!(t["source_text"], "No PMH");
    assert_eq!(t["machine_text"], "Không có PMH 0");
    assert_eq!(t["suggested_text"], "Không có tiền sử bệnh 0");
    assert_eq!(t["rule_hits"][0]["rule_id"], "pmh");
    assert_eq!(t["status"], "claimed");
    assert_eq!(t["claimant"], "lan");
}

#[test]
fn status_codes() {
    let s = start(1);
    assert_eq!(s.next("").0, 400);
    let (_, a) = s.next("a");
    let (_, b) = s.next("b");
    assert_eq!(s.next("c").0, 204);
    let a = a.unwrap()["task_id"].as_u64().unwrap();
    let b = b.unwrap()["task_id"].as_u64().unwrap();
    assert_eq!(s.submit(77, "a", "x").0, 404);
    assert_eq!(s.submit(a, "b", "x").0, 409);
    assert_eq!(s.submit(a, "a", "").0, 400);
    let (code, body) = s.submit(a, "a", "Không có tiền sử bệnh");
    assert_eq!(code, 200);
    assert_eq!(body.unwrap()["status"], "submitted");
    assert_eq!(s.submit(a, "a", "again").0, 409);

    s.clock.advance(Duration::minutes(20));
    let (code, body) = s.submit(b, "b", "late");
    assert_eq!(code, 409);
    assert!(body.unwrap()["error"].as_str().unwrap().contains("expired"));
    let p = s.progress();
    assert_eq!((p.open, p.claimed, p.submitted), (1, 0, 1));

    let malformed = ureq::post(&format!("{}/tasks/{b}/submit", s.base))
        .set("content-type", "application/json")
        .send_string("{\"annotator\": 5}");
    assert!(matches!(status_of(malformed).0, 400 | 422));
}

#[test]
fn lexicon_endpoint() {
    let s = start(1);
    let rules: Value = ureq::get(&format!("{}/lexicon", s.base)).call().unwrap().into_json().unwrap();
    assert_eq!(rules[0]["rule_id"], "pmh");
    assert_eq!(rules[0]["action"], "expand_vietnamese");
    assert_eq!(rules[0]["replacement"], "tiền sử bệnh");
}

#[test]
fn concurrent_annotators_over_http() {
    let s = Arc::new(start(50));
    let workers: Vec<_> = (0..8)
        .map(|w| {
            let s = s.clone();
            thread::spawn(move || {
                let who = format!("ann{w}");
                let mut done = Vec::new();
                loop {
                    let (code, body) = s.next(&who);
                    if code == 204 {
                        break;
                    }
                    assert_eq!(code, 200);
                    let id = body.unwrap()["task_id"].as_u64().unwrap();
                    assert_eq!(s.submit(id, &who, "đã sửa").0, 200);
                    done.push(id);
                }
                done
            })
        })
        .collect();
    let all: Vec<u64> = workers.into_iter().flat_map(|h| h.join().unwrap()).collect();
    let unique: HashSet<_> = all.iter().collect();
    assert_eq!(all.len(), 100);
    assert_eq!(unique.len(), 100);
    let p = s.progress();
    assert_eq!((p.total, p.submitted, p.open, p.claimed), (100, 100, 0, 0));
    assert_eq!(p.submitted_by_annotator.values().sum::<u64>(), 100);
}
