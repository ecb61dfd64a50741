// SPDX-License-Identifier: Apache-2.0

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use evpn_bench::{attrs, mac_routes};
use evpn_core::bgp::{parse_update, serialize_update, serialize_withdrawal};

fn codec(c: &mut Criterion) {
    let attrs = attrs();
    let mut group = c.benchmark_group("update");
    for n in [1usize, 100, 1000] {
        let routes = mac_routes(n);
        let msgs = serialize_update(&routes, &attrs).unwrap();
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("serialize", n), &routes, |b, routes| {
            b.iter(|| serialize_update(black_box(routes), &attrs).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("withdraw", n), &routes, |b, routes| {
            b.iter(|| serialize_withdrawal(black_box(routes)).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("parse", n), &msgs, |b, msgs| {
            b.iter(|| msgs.iter().map(|m| parse_update(black_box(m)).unwrap().advertised.len()).sum::<usize>())
        });
    }
    group.finish();
}

criterion_group!(benches, codec);
criterion_main!(benches);
