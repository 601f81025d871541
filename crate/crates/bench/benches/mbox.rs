use agentmail_bench::{conversation, with_attachment};
use agentmail_core::message::{parse_mbox, serialize_mbox};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn round_trip(c: &mut Criterion) {
    let mut group = c.benchmark_group("mbox");
    for n in [10, 100, 1000] {
        let msgs = conversation(n);
        let text = serialize_mbox(&msgs);
        group.throughput(Throughput::Bytes(text.len() as u64));
        group.bench_with_input(BenchmarkId::new("parse", n), &text, |b, t| b.iter(|| parse_mbox(t.as_bytes()).unwrap()));
        group.bench_with_input(BenchmarkId::new("serialize", n), &msgs, |b, m| b.iter(|| serialize_mbox(m)));
    }
    group.finish();

    let mut group = c.benchmark_group("attachment");
    for size in [4 << 10, 1 << 20] {
        let text = serialize_mbox(&[with_attachment(size)]);
        group.throughput(Throughput::Bytes(size as u64));
        group.bench_with_input(BenchmarkId::new("decode", size), &text, |b, t| {
            b.iter(|| {
                let m = parse_mbox(t.as_bytes()).unwrap();
                m[0].attachment("stdout.txt").unwrap().data().unwrap().len()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, round_trip);
criterion_main!(benches);
