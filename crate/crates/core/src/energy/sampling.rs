use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::clock::Clock;
use super::source::EnergySource;
use super::{DomainCounter, EnergyError, EnergyTrace, Result};

/// Counter reads faster than this would mostly measure their own overhead.
pub const MIN_SAMPLING_INTERVAL_NS: u64 = 1_000_000;

/// How long a replay producer blocks on the virtual clock before rechecking
/// the stop flag.
const REPLAY_POLL: Duration = Duration::from_millis(20);

/// A running background sampler. Finish it with [`stop_sampling`].
#[derive(Debug)]
pub struct SamplingSession {
    source: Arc<EnergySource>,
    interval_ns: u64,
    stop: Arc<AtomicBool>,
    stop_tx: Option<Sender<()>>,
    samples: Receiver<DomainCounter>,
    producer: Option<JoinHandle<Result<()>>>,
}

/// Takes an initial sample and starts a producer thread reading all domains
/// every `interval_ns`.
///
/// Live sources tick on real time. Replay sources tick on their virtual
/// clock, so the trace depends only on how far the clock was advanced.
pub fn start_sampling(source: &Arc<EnergySource>, interval_ns: u64) -> Result<SamplingSession> {
    if interval_ns < MIN_SAMPLING_INTERVAL_NS {
        return Err(EnergyError::InvalidInterval(interval_ns));
    }
    if source
        .sampling
        .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
        .is_err()
    {
        return Err(EnergyError::AlreadySampling);
    }

    let (tx, rx) = mpsc::channel();
    let (stop_tx, stop_rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));

    let first = match source.read_counters() {
        Ok(first) => first,
        Err(e) => {
            source.sampling.store(false, Ordering::SeqCst);
            return Err(e);
        }
    };
    let start_ns = first[0].timestamp_ns;
    for c in first {
        let _ = tx.send(c);
    }

    let producer = {
        let source = Arc::clone(source);
        let stop = Arc::clone(&stop);
        std::thread::Builder::new()
            .name("energy-sampler".into())
            .spawn(move || {
                if source.is_replay() {
                    replay_producer(&source, start_ns, interval_ns, &stop, &tx)
                } else {
                    live_producer(&source, interval_ns, &stop_rx, &tx)
                }
            })
            .expect("spawn sampler thread")
    };

    Ok(SamplingSession {
        source: Arc::clone(source),
        interval_ns,
        stop,
        stop_tx: Some(stop_tx),
        samples: rx,
        producer: Some(producer),
    })
}

fn live_producer(
    source: &EnergySource,
    interval_ns: u64,
    stop_rx: &Receiver<()>,
    tx: &Sender<DomainCounter>,
) -> Result<()> {
    let interval = Duration::from_nanos(interval_ns);
    let mut next = Instant::now() + interval;
    loop {
        let wait = next.saturating_duration_since(Instant::now());
        match stop_rx.recv_timeout(wait) {
            Err(RecvTimeoutError::Timeout) => {}
            _ => return Ok(()),
        }
        for c in source.read_counters()? {
            let _ = tx.send(c);
        }
        next += interval;
        // fell behind (suspended, overloaded): skip missed ticks
        let now = Instant::now();
        if next < now {
            next = now + interval;
        }
    }
}

fn replay_producer(
    source: &EnergySource,
    start_ns: u64,
    interval_ns: u64,
    stop: &AtomicBool,
    tx: &Sender<DomainCounter>,
) -> Result<()> {
    let clock = source.virtual_clock().expect("replay source has a virtual clock");
    let mut next = start_ns + interval_ns;
    loop {
        let now = clock.wait_until(next, REPLAY_POLL);
        if now < next {
            if stop.load(Ordering::SeqCst) && clock.now_ns() < next {
                return Ok(());
            }
            continue;
        }
        for c in source.read_at(next)? {
            let _ = tx.send(c);
        }
        next += interval_ns;
    }
}

/// Halts the producer and returns the collected trace.
///
/// A closing sample at the current time is appended when the last tick
/// precedes it, so the trace always covers the whole session.
pub fn stop_sampling(mut session: SamplingSession) -> Result<EnergyTrace> {
    session.halt()
}

impl SamplingSession {
    pub fn interval_ns(&self) -> u64 {
        self.interval_ns
    }

    fn halt(&mut self) -> Result<EnergyTrace> {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(tx) = self.stop_tx.take() {
            let _ = tx.send(());
        }
        if let Some(clock) = self.source.virtual_clock() {
            clock.notify();
        }
        let produced = self
            .producer
            .take()
            .map(|h| h.join().expect("sampler thread panicked"))
            .unwrap_or(Ok(()));

        let result = produced.and_then(|()| {
            let mut trace = EnergyTrace::new(self.interval_ns);
            for c in self.samples.try_iter() {
                trace.push(c)?;
            }
            let closing = self.source.read_counters()?;
            if let Some(last) = trace.span().map(|(_, last)| last) {
                if closing[0].timestamp_ns > last {
                    for c in closing {
                        trace.push(c)?;
                    }
                }
            }
            Ok(trace)
        });
        self.source.sampling.store(false, Ordering::SeqCst);
        result
    }
}

impl Drop for SamplingSession {
    fn drop(&mut self) {
        if self.producer.is_some() {
            let _ = self.halt();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{integrate_window, Domain};

    const MS: u64 = 1_000_000;

    fn constant_source(watts: u64, seconds: u64) -> Arc<EnergySource> {
        let samples = (0..=seconds).flat_map(|s| {
            [Domain::package(0), Domain::dram(0)].map(|d| DomainCounter {
                domain: d,
                cumulative_uj: s * watts * 1_000_000 % 50_000_000,
                max_range_uj: 50_000_000,
                timestamp_ns: s * 1_000_000_000,
            })
        });
        let trace = EnergyTrace::from_samples(1_000_000_000, samples).unwrap();
        Arc::new(EnergySource::replay(trace).unwrap())
    }

    #[test]
    fn ten_replay_samples() {
        let src = constant_source(10, 10);
        let session = start_sampling(&src, 100 * MS).unwrap();
        src.clock().sleep(Duration::from_millis(900));
        let trace = stop_sampling(session).unwrap();
        assert_eq!(trace.samples(Domain::package(0)).len(), 10);
        assert_eq!(trace.samples(Domain::dram(0)).len(), 10);
    }

    #[test]
    fn constant_power_deltas_are_equal() {
        let src = constant_source(10, 10);
        let session = start_sampling(&src, 10 * MS).unwrap();
        for _ in 0..7 {
            src.clock().sleep(Duration::from_millis(300));
        }
        let trace = stop_sampling(session).unwrap();
        let samples = trace.samples(Domain::package(0));
        assert_eq!(samples.len(), 211);
        let deltas: Vec<u64> = samples
            .windows(2)
            .map(|w| crate::energy::counter_delta(w[0].cumulative_uj, w[1].cumulative_uj, w[1].max_range_uj).unwrap())
            .collect();
        assert!(deltas.iter().all(|&d| d == 100_000), "{deltas:?}");
        let w = integrate_window(&trace, 0, 2_100 * MS).unwrap();
        assert!((w.cpu_energy_j - 21.0).abs() < 1e-9);
    }

    #[test]
    fn partial_tick_gets_closing_sample() {
        let src = constant_source(1, 5);
        let session = start_sampling(&src, 1_000 * MS).unwrap();
        src.clock().sleep(Duration::from_millis(1_500));
        let trace = stop_sampling(session).unwrap();
        let ts: Vec<u64> = trace
            .samples(Domain::package(0))
            .iter()
            .map(|s| s.timestamp_ns)
            .collect();
        assert_eq!(ts, vec![0, 1_000 * MS, 1_500 * MS]);
    }

    #[test]
    fn rejects_short_interval_and_double_start() {
        let src = constant_source(1, 5);
        assert!(matches!(start_sampling(&src, 0), Err(EnergyError::InvalidInterval(0))));
        let session = start_sampling(&src, MS).unwrap();
        assert!(matches!(start_sampling(&src, MS), Err(EnergyError::AlreadySampling)));
        stop_sampling(session).unwrap();
        let again = start_sampling(&src, MS).unwrap();
        drop(again);
        assert!(!src.is_sampling());
    }

    #[test]
    fn exhausted_replay_surfaces_on_stop() {
        let src = constant_source(1, 1);
        let session = start_sampling(&src, 100 * MS).unwrap();
        src.clock().sleep(Duration::from_secs(3));
        assert!(matches!(stop_sampling(session), Err(EnergyError::SourceUnavailable(_))));
        assert!(!src.is_sampling());
    }
}
