use super::*;
use crate::device::{DeviceProfile, SimDevice};
use crate::embedding::dequantize_row;
use crate::workload::{generate_trace, PoolingDist, TableWorkload, ZipfSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn group(count: usize, role: Role, rows: u64, elem: usize, pf: f64, prune: f64) -> TableGroup {
    TableGroup {
        count,
        role,
        rows,
        elem_count: elem,
        pooling: pf,
        prune_fraction: prune,
    }
}

fn model(groups: Vec<TableGroup>) -> SyntheticModel {
    SyntheticModel {
        groups,
        idx_type_bytes: 4,
        seed: 42,
    }
}

fn engine_with(
    m: &SyntheticModel,
    profile: DeviceProfile,
    opts: EngineOptions,
) -> (ModelManifest, Engine) {
    let (manifest, tables) = m.build().unwrap();
    let cap = Engine::device_footprint(&manifest, opts.load, profile.block_bytes);
    let dev = Arc::new(SimDevice::new(profile, cap, 7).unwrap());
    let e = Engine::load_model(&manifest, tables, dev, opts).unwrap();
    (manifest, e)
}

fn engine(m: &SyntheticModel, opts: EngineOptions) -> (ModelManifest, Engine) {
    engine_with(m, DeviceProfile::optane(), opts)
}

/// Straight from the device image, ascending index order.
fn oracle(e: &Engine, table_id: u32, indices: &[u64]) -> PooledVector {
    let l = e.layout(table_id).unwrap();
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    let mut acc = vec![0f32; l.meta.elem_count];
    for i in sorted {
        let phys = match &l.mapping {
            Some(m) => m.get(i),
            None => Some(i),
        };
        let vals: Vec<f32> = match phys {
            None => vec![0.0; l.meta.elem_count],
            Some(r) => {
                let b = e
                    .device()
                    .read_image(l.row_offset(r), l.row_bytes as u64)
                    .unwrap();
                match l.format {
                    RowFormat::Quantized => dequantize_row(&QuantizedRow::from_bytes(&b).unwrap()),
                    RowFormat::Raw => b
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                }
            }
        };
        for (a, v) in acc.iter_mut().zip(vals) {
            *a += v;
        }
    }
    PooledVector { values: acc }
}

fn random_indices(rng: &mut ChaCha8Rng, space: u64, n: usize) -> Vec<u64> {
    (0..n).map(|_| rng.random_range(0..space)).collect()
}

#[test]
fn unpruned_table_identical_on_device_either_way() {
    let m = model(vec![group(1, Role::User, 200, 16, 4.0, 0.0)]);
    let (_, a) = engine(&m, EngineOptions::default());
    let opts = EngineOptions {
        load: LoadOptions {
            deprune: true,
            dequantize_at_load: false,
        },
        ..EngineOptions::default()
    };
    let (_, b) = engine(&m, opts);
    let la = a.layout(0).unwrap();
    let img = |e: &Engine| {
        e.device()
            .read_image(la.base_offset, la.size_bytes())
            .unwrap()
    };
    assert_eq!(img(&a), img(&b));
}

#[test]
fn deprune_equivalence_and_accounting() {
    let m = model(vec![group(1, Role::User, 1000, 24, 8.0, 0.5)]);
    let base = EngineOptions {
        row_cache: None,
        pooled: None,
        ..EngineOptions::default()
    };
    let (manifest, off) = engine(&m, base.clone());
    let (_, on) = engine(
        &m,
        EngineOptions {
            load: LoadOptions {
                deprune: true,
                dequantize_at_load: false,
            },
            ..base
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let idx = random_indices(&mut rng, 1000, 12);
        let a = off.lookup_pooled(0, &idx).unwrap();
        let b = on.lookup_pooled(0, &idx).unwrap();
        assert!(a.bit_eq(&b));
    }
    let (l_off, l_on) = (off.layout(0).unwrap(), on.layout(0).unwrap());
    assert_eq!(l_on.size_bytes(), 2 * l_off.size_bytes());
    let freed = off.fm_bytes_resident() - on.fm_bytes_resident();
    assert_eq!(freed, 1000 * 4);
    assert_eq!(freed, manifest.pruning[&0].mapping_bytes());
    // pruned hits never reach the device when the map is kept
    assert!(off.stats().pruned_skips > 0);
    assert_eq!(on.stats().pruned_skips, 0);
    assert!(on.stats().device_reads > off.stats().device_reads);
}

#[test]
fn resident_rows_need_no_reads_and_cold_misses_read_once_each() {
    let m = model(vec![group(1, Role::User, 500, 32, 4.0, 0.0)]);
    let (_, e) = engine(
        &m,
        EngineOptions {
            pooled: None,
            ..EngineOptions::default()
        },
    );
    let idx = [3u64, 17, 99, 250, 499];
    e.lookup_pooled(0, &idx).unwrap();
    assert_eq!(e.stats().device_reads, 5);
    e.lookup_pooled(0, &[99, 3, 3]).unwrap();
    assert_eq!(e.stats().device_reads, 5);
}

#[test]
fn duplicate_cold_indices_each_read() {
    let m = model(vec![group(1, Role::User, 500, 32, 4.0, 0.0)]);
    let (_, e) = engine(&m, EngineOptions::default());
    e.lookup_pooled(0, &[8, 8, 9]).unwrap();
    let s = e.stats();
    assert_eq!(s.device_reads, 3);
    assert_eq!(s.device_reads, s.row_cache.misses);
}

#[test]
fn outputs_match_device_oracle_across_flags() {
    let m = model(vec![
        group(3, Role::User, 300, 24, 6.0, 0.0),
        group(2, Role::User, 400, 64, 5.0, 0.4),
        group(2, Role::Item, 100, 16, 3.0, 0.0),
    ]);
    for flags in 0..8u32 {
        let opts = EngineOptions {
            load: LoadOptions {
                deprune: flags & 1 != 0,
                dequantize_at_load: flags & 2 != 0,
            },
            policy: if flags & 4 != 0 {
                PlacementPolicy::FixedFm
            } else {
                PlacementPolicy::SmOnly
            },
            fm_budget_bytes: 40_000,
            ..EngineOptions::default()
        };
        let (manifest, e) = engine(&m, opts);
        let mut rng = ChaCha8Rng::seed_from_u64(flags as u64);
        for _ in 0..100 {
            let t = &manifest.tables[rng.random_range(0..manifest.tables.len())];
            let space = manifest
                .pruning
                .get(&t.table_id)
                .map_or(t.num_rows, |p| p.unpruned_rows());
            let n = rng.random_range(0..10);
            let idx = random_indices(&mut rng, space, n);
            let got = e.lookup_pooled(t.table_id, &idx).unwrap();
            assert!(got.bit_eq(&oracle(&e, t.table_id, &idx)), "flags {flags}");
        }
        assert!(e.fm_bytes_resident() <= 40_000);
    }
}

#[test]
fn out_of_range_index_is_counted() {
    let m = model(vec![group(1, Role::User, 10, 8, 1.0, 0.0)]);
    let (_, e) = engine(&m, EngineOptions::default());
    assert!(matches!(
        e.lookup_pooled(0, &[10]),
        Err(Error::OutOfRange(_))
    ));
    assert_eq!(e.stats().errors, 1);
    assert!(matches!(
        e.lookup_pooled(9, &[0]),
        Err(Error::UnknownTable(9))
    ));
}

#[test]
fn undersized_device_is_refused() {
    let m = model(vec![group(2, Role::User, 1000, 64, 1.0, 0.0)]);
    let (manifest, tables) = m.build().unwrap();
    let dev = Arc::new(SimDevice::new(DeviceProfile::optane(), 4096, 1).unwrap());
    match Engine::load_model(&manifest, tables, dev, EngineOptions::default()) {
        Err(Error::Capacity(msg)) => assert!(msg.contains("t0=")),
        other => panic!("{other:?}"),
    }
}

fn trace_queries(m: &ModelManifest, n: u64, s: f64, b_i: usize, seed: u64) -> Vec<QueryBatch> {
    let spec = ZipfSpec {
        tables: m
            .tables
            .iter()
            .map(|t| TableWorkload {
                table_id: t.table_id,
                num_rows: m
                    .pruning
                    .get(&t.table_id)
                    .map_or(t.num_rows, |p| p.unpruned_rows()),
                role: t.role,
                s,
                pooling: PoolingDist::Poisson(t.avg_pooling_factor),
            })
            .collect(),
        repeat_rate: 0.05,
        batch_items: b_i,
        seed,
    };
    generate_trace(&spec, n)
        .unwrap()
        .records
        .iter()
        .map(QueryBatch::from)
        .collect()
}

#[test]
fn fm_only_modes_agree() {
    let m = model(vec![
        group(2, Role::User, 100, 16, 4.0, 0.0),
        group(2, Role::Item, 100, 16, 2.0, 0.0),
    ]);
    let (manifest, e) = engine(
        &m,
        EngineOptions {
            policy: PlacementPolicy::FixedFm,
            ..EngineOptions::default()
        },
    );
    assert_eq!(e.plan().count(Placement::FmDirect), 4);
    for q in trace_queries(&manifest, 50, 1.0, 4, 3) {
        let a = e.execute_query_mode(&q, ExecMode::Sequential, 0.0).unwrap();
        let b = e.execute_query_mode(&q, ExecMode::Overlapped, 0.0).unwrap();
        assert_eq!(a.outputs, b.outputs);
        assert_eq!(e.stats().device_reads, 0);
    }
}

#[test]
fn overlapped_never_slower_than_sequential() {
    let m = model(vec![
        group(4, Role::User, 2000, 32, 8.0, 0.0),
        group(3, Role::Item, 500, 16, 3.0, 0.0),
    ]);
    for profile in [DeviceProfile::nand(), DeviceProfile::optane()] {
        let (manifest, seq) = engine_with(&m, profile.clone(), EngineOptions::default());
        let (_, ovl) = engine_with(&m, profile, EngineOptions::default());
        let mut t = 0.0;
        for q in trace_queries(&manifest, 300, 1.05, 8, 5) {
            let a = seq.execute_query_mode(&q, ExecMode::Sequential, t).unwrap();
            let b = ovl.execute_query_mode(&q, ExecMode::Overlapped, t).unwrap();
            assert_eq!(a.outputs, b.outputs);
            assert!(b.end_to_end_us <= a.end_to_end_us + 1e-9);
            assert!((a.end_to_end_us - (a.user_us + a.item_us)).abs() < 1e-6);
            assert_eq!(b.end_to_end_us, b.user_us.max(b.item_us));
            t += a.end_to_end_us;
        }
    }
}

#[test]
fn fast_user_path_is_hidden_behind_items() {
    let m = model(vec![
        group(2, Role::User, 5000, 32, 4.0, 0.0),
        group(4, Role::Item, 1000, 64, 14.0, 0.0),
    ]);
    let mut manifest_deny = m.manifest().unwrap();
    manifest_deny.deny_list = (2..6).collect();
    let tables = manifest_deny.synthesize_tables(m.seed).unwrap();
    let opts = EngineOptions::default();
    let cap = Engine::device_footprint(&manifest_deny, opts.load, 512);
    let dev = Arc::new(SimDevice::new(DeviceProfile::optane(), cap, 3).unwrap());
    let e = Engine::load_model(&manifest_deny, tables, dev, opts).unwrap();
    let mut t = 0.0;
    for q in trace_queries(&manifest_deny, 100, 1.05, 50, 9) {
        let r = e.execute_query(&q, t).unwrap();
        assert!(r.user_us <= r.item_us);
        assert_eq!(r.end_to_end_us, r.item_us);
        t += r.end_to_end_us;
    }
}

#[test]
fn updates_are_visible_and_scoped() {
    let m = model(vec![group(2, Role::User, 300, 16, 4.0, 0.0)]);
    let (_, e) = engine(&m, EngineOptions::default());
    let idx = [1u64, 2, 3];
    e.lookup_pooled(0, &idx).unwrap();
    e.lookup_pooled(1, &idx).unwrap();
    e.lookup_pooled(1, &idx).unwrap();
    let before = e.row_cache().unwrap().stats().table_hit_rate(1);
    let pooled_before = e.stats().pooled.hits;

    let new_row = crate::embedding::quantize_row(&[5.0; 16]).unwrap();
    let rep = e
        .apply_update(&[
            (0, 2, new_row.clone()),
            (0, 900, new_row.clone()),
            (8, 0, new_row.clone()),
        ])
        .unwrap();
    assert_eq!(rep.applied, 1);
    assert_eq!(rep.rejected.len(), 2);
    assert_eq!(e.row_cache().unwrap().stats().table_hit_rate(1), before);
    assert_eq!(e.stats().pooled.hits, pooled_before);

    let got = e.lookup_pooled(0, &idx).unwrap();
    assert!(got.bit_eq(&oracle(&e, 0, &idx)));
    assert!(got.values.iter().all(|v| *v > 2.9));
}

#[test]
fn replay_after_update_matches_cold_model() {
    let m = model(vec![
        group(2, Role::User, 400, 24, 6.0, 0.0),
        group(1, Role::Item, 100, 16, 2.0, 0.0),
    ]);
    let (manifest, warm) = engine(&m, EngineOptions::default());
    let queries = trace_queries(&manifest, 200, 1.05, 3, 11);
    for q in &queries[..100] {
        warm.execute_query(q, 0.0).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let updates: Vec<(u32, u64, QuantizedRow)> = (0..50)
        .map(|_| {
            let t = rng.random_range(0..3u32);
            let meta = &manifest.tables[t as usize];
            let vals: Vec<f32> = (0..meta.elem_count)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            (
                t,
                rng.random_range(0..meta.num_rows),
                crate::embedding::quantize_row(&vals).unwrap(),
            )
        })
        .collect();
    warm.apply_update(&updates).unwrap();

    let mut tables = manifest.synthesize_tables(m.seed).unwrap();
    for (t, r, q) in &updates {
        tables[*t as usize].set_row(*r, q).unwrap();
    }
    let cap = Engine::device_footprint(&manifest, LoadOptions::default(), 512);
    let dev = Arc::new(SimDevice::new(DeviceProfile::optane(), cap, 7).unwrap());
    let cold = Engine::load_model(&manifest, tables, dev, EngineOptions::default()).unwrap();
    for q in &queries {
        let a = warm.execute_query(q, 0.0).unwrap();
        let b = cold.execute_query(q, 0.0).unwrap();
        assert_eq!(a.outputs, b.outputs);
    }
}

#[test]
fn device_reads_equal_lookups_without_caches() {
    let m = model(vec![
        group(3, Role::User, 1000, 16, 5.0, 0.0),
        group(1, Role::Item, 100, 8, 2.0, 0.0),
    ]);
    let (manifest, e) = engine(
        &m,
        EngineOptions {
            row_cache: None,
            pooled: None,
            ..EngineOptions::default()
        },
    );
    let qs = trace_queries(&manifest, 100, 1.05, 2, 2);
    let expected: u64 = qs
        .iter()
        .flat_map(|q| &q.lookups)
        .flat_map(|l| &l.lists)
        .map(|l| l.len() as u64)
        .sum();
    for q in &qs {
        e.execute_query(q, 0.0).unwrap();
    }
    assert_eq!(e.stats().device_reads, expected);
    assert_eq!(e.device().stats().reads, expected);
}

#[test]
fn warmup_on_repeated_query() {
    let m = model(vec![group(1, Role::User, 1000, 16, 5.0, 0.0)]);
    let (_, e) = engine(&m, EngineOptions::default());
    let q = QueryBatch {
        query_id: 0,
        lookups: vec![TableLookup {
            table_id: 0,
            lists: vec![vec![1, 5, 9, 500]],
        }],
    };
    let rep = e.warmup_stats(&vec![q; 10], 1).unwrap();
    assert_eq!(rep.hit_rates[0], 0.0);
    assert!(rep.hit_rates[1..].iter().all(|&h| h == 1.0));
    assert_eq!(rep.queries_to_steady, Some(2));
    assert!(rep.qps_ratio < 1.0);
}

#[test]
fn warmup_uniform_plateau() {
    let rows = 4000u64;
    let m = model(vec![group(1, Role::User, rows, 56, 10.0, 0.0)]);
    // 64 B rows land in the memory-optimized cache: 255 + 8 bytes per entry
    let cache_rows = 1000usize;
    let rc = CacheConfig::with_capacity(cache_rows * (255 + 8), 0, 1);
    let (manifest, e) = engine(
        &m,
        EngineOptions {
            row_cache: Some(rc),
            pooled: None,
            ..EngineOptions::default()
        },
    );
    let mut qs = trace_queries(&manifest, 4000, 0.0, 1, 8);
    for q in &mut qs {
        q.lookups[0].lists[0].truncate(10);
    }
    let rep = e.warmup_stats(&qs, 200).unwrap();
    let expect = cache_rows as f64 / rows as f64;
    assert!(
        (rep.steady_hit_rate - expect).abs() < 0.02,
        "{}",
        rep.steady_hit_rate
    );
}

#[test]
fn warmup_zipf_smoothed_non_decreasing() {
    let m = model(vec![group(1, Role::User, 20_000, 56, 10.0, 0.0)]);
    let rc = CacheConfig::with_capacity(4000 * (255 + 8), 0, 1);
    let (manifest, e) = engine(
        &m,
        EngineOptions {
            row_cache: Some(rc),
            pooled: None,
            ..EngineOptions::default()
        },
    );
    let qs = trace_queries(&manifest, 10_000, 1.05, 1, 12);
    let rep = e.warmup_stats(&qs, 1000).unwrap();
    for w in rep.hit_rates.windows(2) {
        assert!(w[1] >= w[0] - 0.01, "{:?}", rep.hit_rates);
    }
}
