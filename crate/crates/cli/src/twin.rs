//! `replay` and `serve`: both feed the same engine and write the same outputs.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use drilltwin::engine::{
    self, parse_stream_line, BoundedQueue, CalibrationBundle, EngineOptions, Frame, FrameReport, RecordPipeline,
    ReplaySummary, TwinState,
};
use drilltwin::VoxelVolume;

use crate::files::{emit, io_failure, write_text, CmdResult, Failure};
use crate::SessionArgs;

const POLL: Duration = Duration::from_millis(100);

fn write_outputs(session: &SessionArgs, state: &TwinState, summary: &ReplaySummary) -> CmdResult {
    state.volume().save(&session.out_volume)?;
    if let Some(path) = &session.carve_log {
        let f = std::fs::File::create(path).map_err(|e| io_failure(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        engine::write_carve_log(&mut w, state.carve_log()).map_err(|e| io_failure(path, e))?;
        w.flush().map_err(|e| io_failure(path, e))?;
    }
    if let Some(path) = &session.summary {
        write_text(path, &summary.to_json())?;
    }
    Ok(())
}

fn load_session(session: &SessionArgs) -> Result<(CalibrationBundle, VoxelVolume, EngineOptions), Failure> {
    let bundle = CalibrationBundle::load(&session.bundle)?;
    let volume = VoxelVolume::load(&session.volume)?;
    let options = session.engine.options()?;
    Ok((bundle, volume, options))
}

fn print_summary(summary: &ReplaySummary) {
    emit(summary.to_json());
}

pub fn replay(log: &Path, session: &SessionArgs) -> CmdResult {
    let (bundle, volume, options) = load_session(session)?;
    let samples = engine::load_pose_log(log)?;
    let outcome = engine::replay(samples, bundle, volume, options)?;
    write_outputs(session, &outcome.state, &outcome.summary)?;
    print_summary(&outcome.summary);
    Ok(())
}

/// Per-connection counters reported back to the engine thread.
#[derive(Default)]
struct ReaderStats {
    skipped: usize,
    late_dropped: usize,
}

/// Reads LF-delimited records until EOF or shutdown, pushing reordered frames
/// into `queue`. Malformed lines are counted and skipped.
fn read_client(stream: TcpStream, queue: &BoundedQueue<Frame>, reorder_s: f64, term: &AtomicBool) -> ReaderStats {
    let mut stats = ReaderStats::default();
    let mut pipeline = RecordPipeline::new(reorder_s);
    if stream.set_read_timeout(Some(POLL)).is_err() {
        return stats;
    }
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    let handle = |line: &[u8], pipeline: &mut RecordPipeline, stats: &mut ReaderStats| {
        let Ok(text) = std::str::from_utf8(line) else {
            stats.skipped += 1;
            return;
        };
        if text.trim().is_empty() {
            return;
        }
        match parse_stream_line(text) {
            Ok(sample) => pipeline.push(sample).into_iter().for_each(|f| {
                queue.push(f);
            }),
            Err(_) => stats.skipped += 1,
        }
    };
    loop {
        if term.load(Ordering::Relaxed) {
            break;
        }
        // On a timeout, bytes read so far stay in `buf` and the next call
        // continues the same line.
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) => break,
            Ok(_) => {
                if buf.last() == Some(&b'\n') {
                    buf.pop();
                    handle(&buf, &mut pipeline, &mut stats);
                    buf.clear();
                }
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {}
            Err(_) => break,
        }
    }
    if !buf.is_empty() {
        handle(&buf, &mut pipeline, &mut stats);
    }
    pipeline.finish().into_iter().for_each(|f| {
        queue.push(f);
    });
    stats.late_dropped = pipeline.late_dropped();
    stats
}

/// Steps every queued frame until the reader closes the queue.
fn drain(queue: &BoundedQueue<Frame>, state: &mut TwinState, reports: &mut Vec<FrameReport>) -> Result<(), Failure> {
    while let Some(frame) = queue.pop() {
        reports.push(state.step(&frame)?);
    }
    Ok(())
}

pub fn serve(host: &str, port: u16, once: bool, queue_capacity: usize, session: &SessionArgs) -> CmdResult {
    if queue_capacity == 0 {
        return Err(Failure::file("InvalidInput", "queue capacity must be positive"));
    }
    let (bundle, volume, options) = load_session(session)?;
    if bundle.f_db_d.is_none() || bundle.f_pb_p.is_none() {
        return Err(Failure::solver("MissingCalibration", "bundle needs f_db_d and f_pb_p to carve"));
    }
    let listener = TcpListener::bind((host, port))
        .map_err(|e| Failure::file("BindError", format!("cannot listen on {host}:{port}: {e}")))?;
    let addr = listener.local_addr().map_err(|e| Failure::file("BindError", e))?;
    listener.set_nonblocking(true).map_err(|e| Failure::file("BindError", e))?;

    let term = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        signal_hook::flag::register(sig, Arc::clone(&term)).map_err(|e| Failure::file("SignalError", e))?;
    }
    emit(format_args!("listening on {addr}"));
    std::io::stdout().flush().ok();

    let mut state = TwinState::new(bundle, volume, options);
    let mut reports: Vec<FrameReport> = Vec::new();
    let (mut skipped, mut late_dropped, mut queue_dropped) = (0, 0, 0);
    let flush = |state: &TwinState, reports: &[FrameReport], skipped, late_dropped, queue_dropped| {
        let mut summary = ReplaySummary::from_reports(state, reports);
        summary.skipped = skipped;
        summary.late_dropped = late_dropped;
        summary.queue_dropped = queue_dropped;
        write_outputs(session, state, &summary)?;
        print_summary(&summary);
        Ok::<(), Failure>(())
    };

    while !term.load(Ordering::Relaxed) {
        let stream = match listener.accept() {
            Ok((stream, _)) => stream,
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(20));
                continue;
            }
            Err(e) => return Err(Failure::file("IoError", e)),
        };
        stream.set_nonblocking(false).map_err(|e| Failure::file("IoError", e))?;
        let queue = Arc::new(BoundedQueue::new(queue_capacity));
        let reader = {
            let (queue, term) = (Arc::clone(&queue), Arc::clone(&term));
            let reorder_s = options.reorder_window_s;
            std::thread::spawn(move || {
                let stats = read_client(stream, &queue, reorder_s, &term);
                queue.close();
                stats
            })
        };
        let stepped = drain(&queue, &mut state, &mut reports);
        let stats = reader.join().expect("reader thread");
        stepped?;
        skipped += stats.skipped;
        late_dropped += stats.late_dropped;
        queue_dropped += queue.dropped();
        flush(&state, &reports, skipped, late_dropped, queue_dropped)?;
        if once || term.load(Ordering::Relaxed) {
            return Ok(());
        }
    }
    flush(&state, &reports, skipped, late_dropped, queue_dropped)
}
