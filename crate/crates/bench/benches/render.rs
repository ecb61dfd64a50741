// SPDX-License-Identifier: Apache-2.0

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use evpn_bench::{policy, record};
use evpn_core::netconf::xml::Element;
use evpn_core::peconf::render_evi_config;

fn render(c: &mut Criterion) {
    let evi = record(42, 4);
    let rp = policy();
    c.bench_function("render_evi", |b| b.iter(|| render_evi_config(black_box(&evi), None, "pe1").unwrap()));
    c.bench_function("render_evi_with_policy", |b| {
        b.iter(|| render_evi_config(black_box(&evi), Some(&rp), "pe1").unwrap())
    });

    let xml = render_evi_config(&evi, Some(&rp), "pe1").unwrap().element().to_xml();
    c.bench_function("parse_config_xml", |b| b.iter(|| Element::parse(black_box(&xml)).unwrap()));
}

criterion_group!(benches, render);
criterion_main!(benches);
