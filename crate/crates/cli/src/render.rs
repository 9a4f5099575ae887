//! Human-readable output.

use irec_core::graph::ImportReport;
use irec_core::tagmap::{MappingDecision, Outcome, ParentRef};
use irec_core::workflow::{CaptureResult, EventKind, FinalPayload, OpenAck, ResultView, SessionEvent};
use irec_server::TagView;

fn outcome(o: &Outcome) -> String {
    match o {
        Outcome::MapTo { tag_id } => format!("map to {tag_id}"),
        Outcome::CreateUnder { parent: ParentRef::Existing(p), name } => format!("create \"{name}\" under {p}"),
        Outcome::CreateUnder { parent: ParentRef::NewRoot(r), name } => format!("create \"{name}\" under new root \"{r}\""),
        Outcome::Rejected => "reject".to_owned(),
    }
}

pub fn decision(d: &MappingDecision) {
    let status = serde_json::to_value(d.status).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
    let origin = serde_json::to_value(d.origin).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
    print!("{}  [{status}]  \"{}\" -> {} ({origin})", d.id, d.suggestion.raw_name, outcome(&d.outcome));
    match &d.applied_tag_id {
        Some(t) => println!("  applied {t}"),
        None => println!(),
    }
}

pub fn decisions(list: &[MappingDecision]) {
    if list.is_empty() {
        println!("no decisions");
    }
    list.iter().for_each(decision);
}

pub fn capture(r: &CaptureResult) {
    println!("card {}", r.card.id);
    println!("problem: {}", r.card.problem_text);
    println!("insight: {}", r.card.insight_text);
    if !r.parsed.complete {
        println!("note: the note could not be parsed; the problem statement is a guess");
    }
    println!("{} tag decision(s) pending:", r.decisions.len());
    r.decisions.iter().for_each(decision);
}

pub fn progress(ev: &SessionEvent) {
    let detail = match ev.kind {
        EventKind::PreliminaryResults | EventKind::RerankedResults => {
            let n = ev.payload.get("results").and_then(|r| r.as_array()).map_or(0, Vec::len);
            format!("{n} results")
        }
        EventKind::TagsResolved => {
            let n = ev.payload.get("entry_tags").and_then(|r| r.as_array()).map_or(0, Vec::len);
            format!("{n} entry tags")
        }
        EventKind::AssessmentsReady => {
            let n = ev.payload.get("assessments").and_then(|r| r.as_array()).map_or(0, Vec::len);
            format!("{n} assessed")
        }
        EventKind::FinalResults | EventKind::Error => return,
    };
    eprintln!("[{}] {detail}", ev.kind.as_str());
}

pub fn final_results(p: &FinalPayload) {
    if p.provide_nothing {
        println!("no results (provide-nothing) [mode {}, filter {}]", p.mode, p.filter_level);
        return;
    }
    println!("{} result(s) [mode {}, filter {}]", p.results.len(), p.mode, p.filter_level);
    for r in &p.results {
        let k = &r.view.ranked;
        let sim = r.assessment.as_ref().map_or_else(|| "unassessed".to_owned(), |a| format!("similarity {}", a.score.get()));
        println!(
            "{}. {}  S_final={:.6}  R={:.6} A={:.6} T={:.6} D={:.6}  {sim}",
            r.rank, k.card_id, k.score, k.relevance, k.access, k.temporal, k.diversity
        );
        println!("   problem: {}", r.view.problem_text);
        println!("   insight: {}", r.view.insight_text);
    }
}

pub fn opened(ack: &OpenAck, view: &ResultView) {
    println!();
    println!("opened {} (accessed {} time(s))", ack.card_id, ack.access_count);
    println!("{}", view.insight_text);
}

pub fn import(r: &ImportReport) {
    println!("imported {}, failed {} in {} ms", r.imported, r.failed, r.elapsed.as_millis());
    for f in r.failures.iter().take(20) {
        println!("  line {}: {}", f.line, f.reason);
    }
    if r.failures.len() > 20 {
        println!("  ... {} more", r.failures.len() - 20);
    }
}

pub fn tags(tags: &[TagView]) {
    fn walk(tags: &[TagView], parent: Option<&str>, depth: usize) {
        let mut children: Vec<&TagView> = tags.iter().filter(|t| t.parent_id.as_deref() == parent).collect();
        children.sort_by(|a, b| a.name.cmp(&b.name));
        for t in children {
            println!("{}{}  ({})", "  ".repeat(depth), t.name, t.id);
            walk(tags, Some(&t.id), depth + 1);
        }
    }
    if tags.is_empty() {
        println!("no tags");
    }
    walk(tags, None, 0);
}
