use gaitcaps::evaluation::{aggregate, build_protocol, embed, export_embeddings, rank1_matrix, Embedded, ProtocolKind, RankMatrix};
use gaitcaps::gait_data::{load_dataset, parse_conditions, synth_dataset, GaitSequence, Layout};
use gaitcaps::training::{Checkpoint, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn checkpoint(n_classes: usize) -> Checkpoint {
    let mut cfg = TrainConfig::desk();
    cfg.arch.n_classes = n_classes;
    let params = cfg.arch.init(3).unwrap();
    Checkpoint::new(cfg, params).unwrap()
}

#[test]
fn embeddings_are_deterministic_and_order_free() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(dir.path(), 2, &[0, 90], &parse_conditions("nm:1").unwrap(), 5, 1).unwrap();
    let idx = load_dataset(dir.path(), Layout::CasiaB).unwrap();
    let ckpt = checkpoint(2);
    let seq = &idx.sequences()[0];
    let a = embed(seq, &ckpt).unwrap();
    assert_eq!(a.len(), 128);
    assert_eq!(a, embed(seq, &ckpt).unwrap());
    let mut frames = seq.frames.clone();
    frames.reverse();
    let shuffled = GaitSequence::new(seq.key.clone(), frames, seq.source.clone()).unwrap();
    assert_eq!(a, embed(&shuffled, &ckpt).unwrap());
}

#[test]
fn architecture_mismatch_is_reported() {
    let mut ckpt = checkpoint(2);
    ckpt.config.arch.hidden = 64;
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(dir.path(), 2, &[0, 90], &parse_conditions("nm:1").unwrap(), 2, 1).unwrap();
    let idx = load_dataset(dir.path(), Layout::CasiaB).unwrap();
    let e = embed(&idx.sequences()[0], &ckpt).unwrap_err().to_string();
    assert!(e.contains("shape"), "{e}");
}

fn brute_force(gallery: &[Embedded], probes: &[Embedded], views: &[u32]) -> RankMatrix {
    let mut cells = vec![vec![None; views.len()]; views.len()];
    for (pi, pv) in views.iter().enumerate() {
        for (gi, gv) in views.iter().enumerate() {
            let ps: Vec<&Embedded> = probes.iter().filter(|p| p.view == *pv).collect();
            if pv == gv || ps.is_empty() {
                continue;
            }
            let hits = ps
                .iter()
                .filter(|p| {
                    let mut ranked: Vec<(f64, usize)> = gallery
                        .iter()
                        .enumerate()
                        .filter(|(_, g)| g.view == *gv)
                        .map(|(i, g)| (g.embedding.iter().zip(&p.embedding).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(), i))
                        .collect();
                    ranked.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    gallery[ranked[0].1].identity == p.identity
                })
                .count();
            cells[pi][gi] = Some(100.0 * hits as f64 / ps.len() as f64);
        }
    }
    RankMatrix { views: views.to_vec(), cells }
}

fn random_set(rng: &mut ChaCha8Rng, ids: usize, views: &[u32], per: usize, dim: usize) -> Vec<Embedded> {
    let mut out = Vec::new();
    for id in 0..ids {
        for &view in views {
            for _ in 0..per {
                out.push(Embedded {
                    identity: format!("{id}"),
                    view,
                    embedding: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                });
            }
        }
    }
    out
}

#[test]
fn rank1_matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let views = [0, 90];
        let g = random_set(&mut rng, 3, &views, 2, 4);
        let p = random_set(&mut rng, 3, &views, 1, 4);
        assert_eq!(rank1_matrix(&g, &p, &views).unwrap(), brute_force(&g, &p, &views));
    }
}

#[test]
fn aggregate_matches_arithmetic_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let views = vec![0, 30, 60, 90];
    let cells: Vec<Vec<Option<f64>>> = (0..4)
        .map(|i| (0..4).map(|j| (i != j).then(|| rng.gen_range(0.0..100.0))).collect())
        .collect();
    let m = RankMatrix { views, cells: cells.clone() };
    let means = aggregate(&m);
    for (i, row) in cells.iter().enumerate() {
        let vals: Vec<f64> = row.iter().flatten().copied().collect();
        assert!((means.per_view[i].unwrap() - vals.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }
    let all: Vec<f64> = cells.iter().flatten().flatten().copied().collect();
    assert!((means.overall.unwrap() - all.iter().sum::<f64>() / 12.0).abs() < 1e-12);

    let single = RankMatrix { views: vec![0, 1], cells: vec![vec![None, Some(40.0)], vec![None, None]] };
    assert_eq!(aggregate(&single).per_view, vec![Some(40.0), None]);
}

#[test]
fn gallery_order_and_scale_do_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let views = [0, 45, 90];
    let mut g = random_set(&mut rng, 4, &views, 2, 5);
    let p = random_set(&mut rng, 4, &views, 1, 5);
    let base = rank1_matrix(&g, &p, &views).unwrap();
    g.shuffle(&mut rng);
    assert_eq!(rank1_matrix(&g, &p, &views).unwrap(), base);
    let scale = |s: &[Embedded]| -> Vec<Embedded> {
        s.iter().map(|e| Embedded { embedding: e.embedding.iter().map(|v| v * 3.5).collect(), ..e.clone() }).collect()
    };
    assert_eq!(rank1_matrix(&scale(&g), &scale(&p), &views).unwrap(), base);
}

#[test]
fn embedding_export_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(&dir.path().join("d"), 2, &[0, 90], &parse_conditions("nm:2").unwrap(), 3, 4).unwrap();
    let idx = load_dataset(&dir.path().join("d"), Layout::CasiaB).unwrap();
    let split = build_protocol(&idx, ProtocolKind::Synthetic).unwrap();
    let ckpt = checkpoint(2);
    let path = dir.path().join("e.csv");
    assert_eq!(export_embeddings(&idx, &split, &ckpt, &path).unwrap(), 8);
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 9);
    let header: Vec<&str> = lines[0].split(',').collect();
    assert_eq!(&header[..4], ["id", "view", "condition", "e0"]);
    assert_eq!(header.len(), 3 + 128);
    for (line, entry) in lines[1..].iter().zip(split.entries()) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), header.len());
        let want = embed(&idx.sequences()[entry.sequence], &ckpt).unwrap();
        for (c, w) in cols[3..].iter().zip(&want) {
            let v: f64 = c.parse().unwrap();
            assert!((v - w).abs() <= 1e-8 * w.abs().max(1e-300), "{v} vs {w}");
        }
    }
}
