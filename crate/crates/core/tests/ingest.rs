mod common;

use std::collections::BTreeMap;
use std::path::Path;

use common::Fixture;
use dexpipe::ingest::{
    load_session, resample, save_annotations, save_session, segment_demos, DemoAnnotation, IngestError,
};
use dexpipe::synth::SynthSpec;

fn small() -> Fixture {
    Fixture::new(SynthSpec {
        frames: 90,
        demos: vec![DemoAnnotation {
            start_frame: 3,
            end_frame: 80,
            label: "reach".into(),
        }],
        ..SynthSpec::default()
    })
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn sixty_to_twenty_keeps_every_third_frame() {
    let fx = small();
    let s = fx.session();
    let kept = resample(&s.frames, 60, 20).unwrap();
    assert_eq!(kept.len(), 30);
    for (i, f) in kept.iter().enumerate() {
        assert_eq!(f, &s.frames[3 * i]);
    }
    assert_eq!(resample(&s.frames, 60, 60).unwrap(), s.frames);
    assert!(matches!(
        resample(&s.frames, 60, 25),
        Err(IngestError::NonDivisibleRate { .. })
    ));
}

#[test]
fn session_round_trips_bit_identically() {
    let fx = small();
    let s = fx.session();
    let copy = fx.path("copy");
    save_session(&copy, &s.meta, &s.rig, &s.frames).unwrap();
    save_annotations(&copy, &s.annotations().unwrap()).unwrap();
    for f in &s.frames {
        let d = s.depth(f).unwrap();
        d.write(&dexpipe::ingest::frame_file(&copy, "depth", f.depth_index)).unwrap();
        s.rgb(f)
            .unwrap()
            .write(&dexpipe::ingest::frame_file(&copy, "rgb", f.rgb_index))
            .unwrap();
    }
    assert_eq!(read_tree(&fx.session_dir), read_tree(&copy));
    assert_eq!(load_session(&copy).unwrap().frames, s.frames);
}

#[test]
fn segments_follow_annotations() {
    let fx = small();
    let s = fx.session();
    let ann = vec![
        DemoAnnotation {
            start_frame: 50,
            end_frame: 60,
            label: "b".into(),
        },
        DemoAnnotation {
            start_frame: 5,
            end_frame: 9,
            label: "a".into(),
        },
    ];
    let seg = segment_demos(&s.frames, &ann).unwrap();
    assert_eq!(seg[0].len(), 11);
    assert_eq!(seg[1][0], s.frames[5]);
    let overlap = vec![ann[0].clone(), DemoAnnotation { start_frame: 60, end_frame: 70, label: "c".into() }];
    assert!(matches!(
        segment_demos(&s.frames, &overlap),
        Err(IngestError::OverlappingAnnotations { first: 0, second: 1 })
    ));
    let beyond = vec![DemoAnnotation { start_frame: 80, end_frame: 90, label: "d".into() }];
    assert!(matches!(segment_demos(&s.frames, &beyond), Err(IngestError::OutOfRange { .. })));
}

#[test]
fn damaged_sessions_are_reported() {
    let fx = small();
    let frames = fx.session_dir.join("frames.jsonl");
    let text = std::fs::read_to_string(&frames).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();

    lines.swap(4, 5);
    std::fs::write(&frames, lines.join("\n") + "\n").unwrap();
    assert!(matches!(
        load_session(&fx.session_dir),
        Err(IngestError::NonMonotonicTimestamps { .. })
    ));

    lines.swap(4, 5);
    lines.pop();
    std::fs::write(&frames, lines.join("\n") + "\n").unwrap();
    assert!(matches!(
        load_session(&fx.session_dir),
        Err(IngestError::FrameCountMismatch { .. })
    ));

    lines.push("{\"t\": 1.0}");
    std::fs::write(&frames, lines.join("\n") + "\n").unwrap();
    assert!(matches!(
        load_session(&fx.session_dir),
        Err(IngestError::MalformedRecord { .. })
    ));

    std::fs::remove_file(&frames).unwrap();
    assert!(matches!(load_session(&fx.session_dir), Err(IngestError::MissingFile(_))));
}
