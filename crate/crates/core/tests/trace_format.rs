//! Frozen trace-dump format: one JSON object per event, with the
//! protocol's own lock traffic visible in the stream.

use rmaft_core::*;

fn fixture() -> Machine {
    let mut m = Machine::new(MachineConfig {
        n_procs: 2,
        window_size: 4,
        ..MachineConfig::default()
    });
    m.issue_put(ProcessId(0), ProcessId(1), 2, 7, false, false).unwrap();
    m.issue_get(ProcessId(1), ProcessId(0), 0, false).unwrap();
    m.sync(SyncKind::Flush, ProcessId(0), Target::One(ProcessId(1)), None).unwrap();
    m.sync(SyncKind::Flush, ProcessId(1), Target::One(ProcessId(0)), None).unwrap();
    m.local_write(ProcessId(0), 0, 5).unwrap();
    m
}

const GOLDEN: &str = r#"{"event":0,"kind":{"action":{"combine":false,"data":{"put":{"cell":2,"value":7}},"kind":"put","src":0,"stamp":{"ec":0,"gc":0,"gnc":0,"sc":0},"trg":1},"type":"issue"},"proc":0}
{"event":1,"kind":{"sync":{"kind":"lock","src":0,"stamp":{"ec":0,"gc":0,"gnc":0,"sc":0},"structure":"put_log","trg":{"one":0}},"type":"sync"},"proc":0}
{"event":2,"kind":{"sync":{"kind":"unlock","src":0,"stamp":{"ec":0,"gc":0,"gnc":0,"sc":0},"structure":"put_log","trg":{"one":0}},"type":"sync"},"proc":0}
{"event":3,"kind":{"action":{"combine":false,"data":{"get":{"cell":0,"value":0}},"kind":"get","src":1,"stamp":{"ec":0,"gc":0,"gnc":0,"sc":0},"trg":0},"type":"issue"},"proc":1}
{"event":4,"kind":{"sync":{"kind":"flush","src":0,"stamp":{"ec":0,"gc":0,"gnc":0,"sc":0},"structure":null,"trg":{"one":1}},"type":"sync"},"proc":0}
{"event":5,"kind":{"sync":{"kind":"flush","src":1,"stamp":{"ec":0,"gc":0,"gnc":0,"sc":0},"structure":null,"trg":{"one":0}},"type":"sync"},"proc":1}
{"event":6,"kind":{"sync":{"kind":"lock","src":1,"stamp":{"ec":0,"gc":0,"gnc":0,"sc":0},"structure":"get_log","trg":{"one":0}},"type":"sync"},"proc":1}
{"event":7,"kind":{"sync":{"kind":"unlock","src":1,"stamp":{"ec":0,"gc":0,"gnc":0,"sc":0},"structure":"get_log","trg":{"one":0}},"type":"sync"},"proc":1}
{"event":8,"kind":{"cell":0,"type":"local_write","value":5},"proc":0}
"#;

#[test]
fn trace_dump_matches_the_golden_fixture() {
    assert_eq!(fixture().trace_jsonl(), GOLDEN);
}

#[test]
fn every_line_parses_with_event_and_proc_fields() {
    for line in fixture().trace_jsonl().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["event"].is_u64());
        assert!(v["proc"].is_u64());
        assert!(v["kind"]["type"].is_string());
    }
}
