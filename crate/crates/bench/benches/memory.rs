use agentmail_bench::{memory_with, AGENT};
use agentmail_core::memory::{parse_msr, replay};
use agentmail_core::message::Message;
use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};

fn render_and_rewrite(c: &mut Criterion) {
    let mut group = c.benchmark_group("context");
    for n in [42, 400] {
        let mem = memory_with(n);
        group.bench_with_input(BenchmarkId::new("render", n), &mem, |b, m| {
            b.iter_batched(|| m.clone(), |mut m| m.render().to_mbox().len(), BatchSize::SmallInput)
        });
        let (lo, hi) = (n * 2 / 3, n * 2 / 3 + 6);
        group.bench_with_input(BenchmarkId::new("msr", n), &mem, |b, m| {
            b.iter_batched(
                || m.clone(),
                |mut m| {
                    let render = m.render();
                    let msg = Message::new(AGENT, "system@localdomain", &format!("MSR {lo}-{hi}"), "Condensed.");
                    let cmd = parse_msr(&msg, &render).unwrap();
                    m.apply_msr(cmd).unwrap()
                },
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn replay_journal(c: &mut Criterion) {
    let mut group = c.benchmark_group("replay");
    for n in [100, 1000] {
        let mut mem = memory_with(n);
        // a rewrite every 50 entries keeps the lookahead path busy
        for k in 0..n / 50 {
            let lo = k * 10;
            let render = mem.render();
            let msg = Message::new(AGENT, "system@localdomain", &format!("MSR {lo}-{}", lo + 3), "Condensed.");
            mem.apply_msr(parse_msr(&msg, &render).unwrap()).unwrap();
        }
        group.bench_with_input(BenchmarkId::new("journal", mem.journal.entries.len()), &mem, |b, m| {
            b.iter(|| replay(&m.journal).unwrap().reconstructed.len())
        });
        group.bench_with_input(BenchmarkId::new("verify", mem.journal.entries.len()), &mem, |b, m| b.iter(|| m.verify().unwrap()));
    }
    group.finish();
}

criterion_group!(benches, render_and_rewrite, replay_journal);
criterion_main!(benches);
