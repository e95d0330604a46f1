mod common;

use common::oracle::reference_render;
use nbagent_core::domain::{CellKind, ExecutionResult, ExecutionStatus, ProjectSpec, RunConfig, Session};
use nbagent_core::render::{render_history, render_untruncated, RenderOptions, ERROR_TAIL_LABEL};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn numbered(prefix: &str, n: usize) -> String {
    (1..=n).map(|i| format!("{prefix} {i}\n")).collect()
}

#[test]
fn mixed_session_matches_reference() {
    let mut s = Session::with_id("s", ProjectSpec::new("T"), RunConfig::default()).unwrap();
    s.append_cell(CellKind::Text, "Plan the load.", "plan", 0).unwrap();
    s.append_cell(CellKind::Code, "print(df)", "load", 0)
        .unwrap()
        .results
        .push(ExecutionResult {
            attempt: 1,
            status: ExecutionStatus::Success,
            stdout: numbered("row", 50),
            stderr: String::new(),
            duration_ms: 0,
            artifacts_written: vec![],
        });
    s.append_cell(CellKind::Code, "fit()", "train", 0)
        .unwrap()
        .results
        .push(ExecutionResult {
            attempt: 1,
            status: ExecutionStatus::Error,
            stdout: numbered("progress", 50),
            stderr: numbered("trace", 50),
            duration_ms: 0,
            artifacts_written: vec![],
        });
    let opts = RenderOptions {
        char_limit: 10_000,
        head_tail_lines: 20,
    };
    let rendered = render_history(&s, opts);
    assert_eq!(rendered, reference_render(&s, 10_000, 20));
    assert!(rendered.contains("row 20\n"));
    assert!(!rendered.contains("row 21\n"));
    assert!(rendered.contains("trace 31\n"));
    assert!(!rendered.contains("trace 30\n"));
    assert!(!rendered.contains("progress"));
}

fn seeded_session(seed: u64) -> Session {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    common::random_session(&mut rng, 20, 200)
}

fn labels(text: &str, prefix: &str) -> Vec<u32> {
    text.lines()
        .filter_map(|l| l.strip_prefix(prefix)?.strip_suffix(':')?.parse().ok())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn rendering_is_pure_and_bounded(seed in any::<u64>()) {
        let s = seeded_session(seed);
        let opts = RenderOptions::from(&s.config);
        let a = render_history(&s, opts);
        prop_assert_eq!(&a, &render_history(&s.clone(), opts));
        prop_assert!(a.chars().count() <= opts.char_limit);
        prop_assert!(render_untruncated(&s, opts).ends_with(&a));
    }

    #[test]
    fn numbering_is_monotone(seed in any::<u64>()) {
        let s = seeded_session(seed);
        let full = render_untruncated(&s, RenderOptions::from(&s.config));
        for prefix in ["Text #", "Code #"] {
            let ns = labels(&full, prefix);
            prop_assert!(ns.windows(2).all(|w| w[0] < w[1]), "{prefix} {ns:?}");
        }
    }

    #[test]
    fn error_tail_only_for_failed_last_cell(seed in any::<u64>()) {
        let s = seeded_session(seed);
        let full = render_untruncated(&s, RenderOptions::from(&s.config));
        let sections = full.lines().filter(|l| *l == ERROR_TAIL_LABEL).count();
        let last_failed = s.cells.last().is_some_and(common::failed_code_cell);
        // Outputs are generated as "line N: ..." so a label can't be forged.
        prop_assert_eq!(sections, usize::from(last_failed));
    }
}
