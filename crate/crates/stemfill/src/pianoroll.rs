//! Standard MIDI File I/O and binary piano-roll conversion.
//!
//! Symbolic music enters the toolkit as SMF format 0/1 byte streams, is
//! resolved into [`NoteEvent`] records grouped by instrument, and is
//! rasterized onto 3-channel binary [`PianoRoll`] grids (drums / bass /
//! guitar) for the binary diffusion models. The inverse path turns maximal
//! horizontal runs of 1-cells back into notes and serializes them as a
//! format-1 file, one track per instrument.
//!
//! Everything here is a pure function over immutable values; rolls are safe
//! to process with a parallel map over files.

use ndarray::Array3;
use thiserror::Error;

/// Default pitches per roll: MIDI 24–95 inclusive.
pub const DEFAULT_PITCHES: usize = 72;
/// Default MIDI note of pitch index 0.
pub const DEFAULT_PITCH_BASE: u8 = 24;
/// Default time steps per 4/4 bar (16th-note grid).
pub const DEFAULT_STEPS_PER_BAR: usize = 16;
/// Ticks per quarter note in emitted files.
pub const WRITE_TPQ: u16 = 480;

#[derive(Debug, Error)]
pub enum MidiError {
    #[error("truncated MIDI data at byte offset {0}")]
    Truncated(usize),
    #[error("expected chunk {expected:?} at byte offset {offset}, found {found:?}")]
    BadChunk {
        offset: usize,
        expected: String,
        found: String,
    },
    #[error("malformed chunk length {len} at byte offset {offset}")]
    BadChunkLength { offset: usize, len: u32 },
    #[error("unsupported SMF format {0} (only 0 and 1)")]
    UnsupportedFormat(u16),
    #[error("unsupported SMPTE time division 0x{0:04x}")]
    SmpteDivision(u16),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

/// The three modeled instrument roles, in fixed channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instrument {
    Drums,
    Bass,
    Guitar,
}

impl Instrument {
    pub const ALL: [Instrument; 3] = [Instrument::Drums, Instrument::Bass, Instrument::Guitar];

    /// Fixed roll channel: Drums=0, Bass=1, Guitar=2.
    pub fn channel(self) -> usize {
        match self {
            Instrument::Drums => 0,
            Instrument::Bass => 1,
            Instrument::Guitar => 2,
        }
    }

    pub fn from_channel(ch: usize) -> Option<Instrument> {
        Instrument::ALL.get(ch).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Instrument::Drums => "drums",
            Instrument::Bass => "bass",
            Instrument::Guitar => "guitar",
        }
    }

    pub fn from_name(name: &str) -> Option<Instrument> {
        match name {
            "drums" => Some(Instrument::Drums),
            "bass" => Some(Instrument::Bass),
            "guitar" => Some(Instrument::Guitar),
            _ => None,
        }
    }
}

/// One resolved note, pre-quantization. Ticks are absolute from file start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoteEvent {
    pub instrument: Instrument,
    pub pitch: u8,
    /// Absolute onset in ticks.
    pub onset: u64,
    /// Duration in ticks, always >= 1.
    pub duration: u64,
    pub velocity: u8,
}

/// Parsed SMF contents: notes bucketed into one track per instrument.
#[derive(Debug, Clone, PartialEq)]
pub struct MidiDocument {
    pub ticks_per_quarter: u16,
    /// (tick, microseconds per quarter note), sorted, first entry at tick 0.
    pub tempo_map: Vec<(u64, u32)>,
    /// One entry per instrument with at least one note, ordered by channel.
    pub tracks: Vec<(Instrument, Vec<NoteEvent>)>,
    /// Note-ons that never saw a matching note-off and were dropped.
    pub unresolved_note_ons: usize,
}

pub const DEFAULT_TEMPO_USPQ: u32 = 500_000; // 120 bpm

impl MidiDocument {
    pub fn empty(ticks_per_quarter: u16) -> Self {
        MidiDocument {
            ticks_per_quarter,
            tempo_map: vec![(0, DEFAULT_TEMPO_USPQ)],
            tracks: Vec::new(),
            unresolved_note_ons: 0,
        }
    }

    pub fn note_count(&self) -> usize {
        self.tracks.iter().map(|(_, n)| n.len()).sum()
    }

    pub fn notes_for(&self, instrument: Instrument) -> &[NoteEvent] {
        self.tracks
            .iter()
            .find(|(i, _)| *i == instrument)
            .map(|(_, n)| n.as_slice())
            .unwrap_or(&[])
    }
}

/// A 3-channel binary note grid, `data[channel][step][pitch]` in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct PianoRoll {
    pub data: Array3<u8>,
    pub steps_per_bar: usize,
    /// MIDI note of pitch index 0.
    pub pitch_base: u8,
}

impl PianoRoll {
    /// All-zero roll spanning `bars` 4/4 bars on the default grid.
    pub fn zeros(bars: usize, steps_per_bar: usize) -> Self {
        PianoRoll {
            data: Array3::zeros((3, bars * steps_per_bar, DEFAULT_PITCHES)),
            steps_per_bar,
            pitch_base: DEFAULT_PITCH_BASE,
        }
    }

    pub fn steps(&self) -> usize {
        self.data.dim().1
    }

    pub fn pitches(&self) -> usize {
        self.data.dim().2
    }

    pub fn bars(&self) -> usize {
        self.steps() / self.steps_per_bar
    }
}

// ---------------------------------------------------------------------------
// SMF parsing
// ---------------------------------------------------------------------------

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if self.pos + n > self.bytes.len() {
            return Err(MidiError::Truncated(self.bytes.len()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, MidiError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Variable-length quantity, at most 4 bytes per the SMF spec.
    fn vlq(&mut self) -> Result<u32, MidiError> {
        let mut value: u32 = 0;
        for i in 0.. {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
            if i == 3 {
                return Err(MidiError::InvalidArg(format!(
                    "variable-length quantity longer than 4 bytes at offset {}",
                    self.pos
                )));
            }
        }
        unreachable!()
    }
}

/// Is this note, on this channel (0-based) with this per-channel program,
/// drums / bass / guitar?
fn classify(channel: u8, program: u8) -> Instrument {
    if channel == 9 {
        Instrument::Drums
    } else if (32..=39).contains(&program) {
        Instrument::Bass
    } else {
        Instrument::Guitar
    }
}

/// Parse an SMF format 0 or 1 byte stream into note events.
///
/// Note-on/note-off pairs (velocity-0 note-ons count as note-offs) are
/// resolved FIFO per channel and pitch. Channel 10 is drums; other channels
/// map to bass for GM programs 32–39 and guitar otherwise. Unresolved
/// note-ons are dropped and counted in `unresolved_note_ons`.
pub fn parse_midi(bytes: &[u8]) -> Result<MidiDocument, MidiError> {
    let mut r = Reader { bytes, pos: 0 };
    let offset = r.pos;
    let magic = r.take(4)?;
    if magic != b"MThd" {
        return Err(MidiError::BadChunk {
            offset,
            expected: "MThd".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let hlen = r.u32()?;
    if hlen < 6 {
        return Err(MidiError::BadChunkLength {
            offset: r.pos - 4,
            len: hlen,
        });
    }
    let format = r.u16()?;
    if format > 1 {
        return Err(MidiError::UnsupportedFormat(format));
    }
    let ntrks = r.u16()?;
    let division = r.u16()?;
    if division & 0x8000 != 0 {
        return Err(MidiError::SmpteDivision(division));
    }
    if division == 0 {
        return Err(MidiError::InvalidArg("time division of zero".into()));
    }
    // skip any extra header bytes
    r.take(hlen as usize - 6)?;

    let mut tempo_map: Vec<(u64, u32)> = Vec::new();
    let mut programs = [0u8; 16];
    let mut notes: Vec<NoteEvent> = Vec::new();
    let mut unresolved = 0usize;

    for _ in 0..ntrks {
        let offset = r.pos;
        let magic = r.take(4)?;
        if magic != b"MTrk" {
            return Err(MidiError::BadChunk {
                offset,
                expected: "MTrk".into(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let len = r.u32()? as usize;
        if r.pos + len > bytes.len() {
            return Err(MidiError::BadChunkLength {
                offset: r.pos - 4,
                len: len as u32,
            });
        }
        let end = r.pos + len;
        let mut tick: u64 = 0;
        let mut running: Option<u8> = None;
        // open note-ons: (channel, pitch) -> FIFO of (onset, velocity)
        let mut open: Vec<((u8, u8), Vec<(u64, u8)>)> = Vec::new();
        while r.pos < end {
            tick += r.vlq()? as u64;
            let mut status = r.u8()?;
            if status & 0x80 == 0 {
                // running status: the byte we read was the first data byte
                status = running.ok_or_else(|| {
                    MidiError::InvalidArg(format!(
                        "data byte 0x{status:02x} with no running status at offset {}",
                        r.pos - 1
                    ))
                })?;
                r.pos -= 1;
            }
            match status {
                0xf0 | 0xf7 => {
                    running = None;
                    let len = r.vlq()? as usize;
                    r.take(len)?;
                }
                0xff => {
                    running = None;
                    let kind = r.u8()?;
                    let len = r.vlq()? as usize;
                    let data = r.take(len)?;
                    if kind == 0x51 && len == 3 {
                        let uspq =
                            ((data[0] as u32) << 16) | ((data[1] as u32) << 8) | data[2] as u32;
                        tempo_map.push((tick, uspq));
                    }
                    // 0x2f end-of-track carries no data; trust chunk length
                }
                _ => {
                    running = Some(status);
                    let channel = status & 0x0f;
                    match status & 0xf0 {
                        0x80 | 0x90 => {
                            let pitch = r.u8()? & 0x7f;
                            let vel = r.u8()? & 0x7f;
                            let is_on = status & 0xf0 == 0x90 && vel > 0;
                            let key = (channel, pitch);
                            if is_on {
                                match open.iter_mut().find(|(k, _)| *k == key) {
                                    Some((_, fifo)) => fifo.push((tick, vel)),
                                    None => open.push((key, vec![(tick, vel)])),
                                }
                            } else if let Some((_, fifo)) =
                                open.iter_mut().find(|(k, _)| *k == key)
                            {
                                if !fifo.is_empty() {
                                    let (onset, velocity) = fifo.remove(0);
                                    let instrument = classify(channel, programs[channel as usize]);
                                    notes.push(NoteEvent {
                                        instrument,
                                        pitch,
                                        onset,
                                        duration: (tick - onset).max(1),
                                        velocity,
                                    });
                                }
                            }
                        }
                        0xa0 | 0xb0 | 0xe0 => {
                            r.take(2)?;
                        }
                        0xc0 => {
                            programs[channel as usize] = r.u8()? & 0x7f;
                        }
                        0xd0 => {
                            r.take(1)?;
                        }
                        _ => {
                            return Err(MidiError::InvalidArg(format!(
                                "unexpected status byte 0x{status:02x} at offset {}",
                                r.pos - 1
                            )));
                        }
                    }
                }
            }
        }
        if r.pos != end {
            return Err(MidiError::BadChunkLength {
                offset,
                len: len as u32,
            });
        }
        unresolved += open.iter().map(|(_, fifo)| fifo.len()).sum::<usize>();
    }

    if tempo_map.is_empty() || tempo_map[0].0 != 0 {
        tempo_map.insert(0, (0, DEFAULT_TEMPO_USPQ));
    }
    tempo_map.sort_by_key(|&(t, _)| t);

    let mut tracks = Vec::new();
    for instrument in Instrument::ALL {
        let mut track: Vec<NoteEvent> = notes
            .iter()
            .copied()
            .filter(|n| n.instrument == instrument)
            .collect();
        if !track.is_empty() {
            track.sort_by_key(|n| (n.onset, n.pitch));
            tracks.push((instrument, track));
        }
    }
    Ok(MidiDocument {
        ticks_per_quarter: division,
        tempo_map,
        tracks,
        unresolved_note_ons: unresolved,
    })
}

// ---------------------------------------------------------------------------
// SMF writing
// ---------------------------------------------------------------------------

fn push_vlq(out: &mut Vec<u8>, mut v: u32) {
    let mut stack = [0u8; 4];
    let mut n = 0;
    loop {
        stack[n] = (v & 0x7f) as u8;
        v >>= 7;
        n += 1;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(stack[i] | if i > 0 { 0x80 } else { 0 });
    }
}

/// Serialize a document as SMF format 1 at 480 ticks per quarter:
/// one track per instrument (plus the tempo event at tick 0 on the first
/// track), notes rescaled if the document uses a different resolution.
pub fn write_midi(doc: &MidiDocument) -> Vec<u8> {
    let rescale = |t: u64| -> u64 {
        if doc.ticks_per_quarter == WRITE_TPQ {
            t
        } else {
            (t * WRITE_TPQ as u64 + doc.ticks_per_quarter as u64 / 2) / doc.ticks_per_quarter as u64
        }
    };
    let uspq = doc.tempo_map.first().map(|&(_, u)| u).unwrap_or(DEFAULT_TEMPO_USPQ);

    let mut tracks_bytes: Vec<Vec<u8>> = Vec::new();
    for (idx, (instrument, notes)) in doc.tracks.iter().enumerate() {
        let mut ev: Vec<(u64, [u8; 3])> = Vec::new();
        let midi_channel: u8 = match instrument {
            Instrument::Drums => 9,
            Instrument::Bass => 0,
            Instrument::Guitar => 1,
        };
        for n in notes {
            let on = rescale(n.onset);
            let off = rescale(n.onset + n.duration).max(on + 1);
            ev.push((on, [0x90 | midi_channel, n.pitch, n.velocity]));
            ev.push((off, [0x80 | midi_channel, n.pitch, 0]));
        }
        // note-offs before note-ons at the same tick so back-to-back runs
        // of the same pitch re-trigger cleanly
        ev.sort_by_key(|&(t, msg)| (t, msg[0] & 0xf0 != 0x80, msg[1]));

        let mut body = Vec::new();
        if idx == 0 {
            push_vlq(&mut body, 0);
            body.extend_from_slice(&[
                0xff,
                0x51,
                0x03,
                (uspq >> 16) as u8,
                (uspq >> 8) as u8,
                uspq as u8,
            ]);
        }
        if *instrument != Instrument::Drums {
            // program change so the parser's instrument map round-trips
            let program: u8 = if *instrument == Instrument::Bass { 33 } else { 27 };
            push_vlq(&mut body, 0);
            body.extend_from_slice(&[0xc0 | midi_channel, program]);
        }
        let mut tick = 0u64;
        for (t, msg) in ev {
            push_vlq(&mut body, (t - tick) as u32);
            body.extend_from_slice(&msg);
            tick = t;
        }
        push_vlq(&mut body, 0);
        body.extend_from_slice(&[0xff, 0x2f, 0x00]);
        tracks_bytes.push(body);
    }
    if tracks_bytes.is_empty() {
        // keep at least the tempo track so the file is well-formed
        let mut body = Vec::new();
        push_vlq(&mut body, 0);
        body.extend_from_slice(&[
            0xff,
            0x51,
            0x03,
            (uspq >> 16) as u8,
            (uspq >> 8) as u8,
            uspq as u8,
        ]);
        push_vlq(&mut body, 0);
        body.extend_from_slice(&[0xff, 0x2f, 0x00]);
        tracks_bytes.push(body);
    }

    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(tracks_bytes.len() as u16).to_be_bytes());
    out.extend_from_slice(&WRITE_TPQ.to_be_bytes());
    for body in tracks_bytes {
        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
    }
    out
}

// ---------------------------------------------------------------------------
// Roll conversion
// ---------------------------------------------------------------------------

/// Rasterize a document onto a `bars`-bar binary grid in 4/4.
///
/// Onsets quantize to the nearest grid step with ties toward the earlier
/// step; every note covers at least one cell. Out-of-window pitches clamp
/// to the nearest edge for bass/guitar and are dropped (and counted in the
/// returned tally) for drums. Notes starting past the grid are ignored.
pub fn to_pianoroll(
    doc: &MidiDocument,
    steps_per_bar: usize,
    bars: usize,
) -> Result<(PianoRoll, usize), MidiError> {
    if bars < 1 || steps_per_bar < 1 {
        return Err(MidiError::InvalidArg(
            "bars and steps_per_bar must be >= 1".into(),
        ));
    }
    let mut roll = PianoRoll::zeros(bars, steps_per_bar);
    let steps = roll.steps();
    let pitches = roll.pitches();
    let base = roll.pitch_base as i64;
    // step length in ticks is (4 * tpq) / steps_per_bar, kept rational
    let den = 4 * doc.ticks_per_quarter as u64;
    let mut dropped = 0usize;
    for (instrument, notes) in &doc.tracks {
        let ch = instrument.channel();
        for n in notes {
            let num = n.onset * steps_per_bar as u64;
            // round to nearest step, ties toward the earlier step
            let step = ((2 * num + den).saturating_sub(1) / (2 * den)) as usize;
            if step >= steps {
                continue;
            }
            let len_num = n.duration * steps_per_bar as u64;
            let len = (len_num.div_ceil(den)).max(1) as usize;
            let idx = n.pitch as i64 - base;
            let idx = if (0..pitches as i64).contains(&idx) {
                idx as usize
            } else if *instrument == Instrument::Drums {
                dropped += 1;
                continue;
            } else {
                idx.clamp(0, pitches as i64 - 1) as usize
            };
            for s in step..(step + len).min(steps) {
                roll.data[(ch, s, idx)] = 1;
            }
        }
    }
    Ok((roll, dropped))
}

/// Inverse rasterization: maximal horizontal runs of 1-cells become single
/// notes (velocity 96) at the given tempo, 480 ticks per quarter.
pub fn from_pianoroll(roll: &PianoRoll, tempo_bpm: f64) -> MidiDocument {
    let ticks_per_step = 4 * WRITE_TPQ as u64 / roll.steps_per_bar as u64;
    let uspq = (60_000_000.0 / tempo_bpm).round() as u32;
    let steps = roll.steps();
    let mut tracks = Vec::new();
    for instrument in Instrument::ALL {
        let ch = instrument.channel();
        let mut notes = Vec::new();
        for s in 0..steps {
            for p in 0..roll.pitches() {
                if roll.data[(ch, s, p)] == 1 && (s == 0 || roll.data[(ch, s - 1, p)] == 0) {
                    let mut len = 1;
                    while s + len < steps && roll.data[(ch, s + len, p)] == 1 {
                        len += 1;
                    }
                    notes.push(NoteEvent {
                        instrument,
                        pitch: roll.pitch_base + p as u8,
                        onset: s as u64 * ticks_per_step,
                        duration: len as u64 * ticks_per_step,
                        velocity: 96,
                    });
                }
            }
        }
        if !notes.is_empty() {
            notes.sort_by_key(|n| (n.onset, n.pitch));
            tracks.push((instrument, notes));
        }
    }
    MidiDocument {
        ticks_per_quarter: WRITE_TPQ,
        tempo_map: vec![(0, uspq)],
        tracks,
        unresolved_note_ons: 0,
    }
}

/// Split a roll into (context, target): context has the named instrument's
/// channel zeroed, target holds only that channel. Cellwise OR of the two
/// reconstructs the input exactly.
pub fn subtract_channel(roll: &PianoRoll, instrument: Instrument) -> (PianoRoll, PianoRoll) {
    let ch = instrument.channel();
    let mut context = roll.clone();
    let mut target = roll.clone();
    for c in 0..3 {
        if c == ch {
            context.data.index_axis_mut(ndarray::Axis(0), c).fill(0);
        } else {
            target.data.index_axis_mut(ndarray::Axis(0), c).fill(0);
        }
    }
    (context, target)
}

/// Fraction of 1-cells in one instrument's channel, in [0, 1].
pub fn note_density(roll: &PianoRoll, instrument: Instrument) -> f64 {
    let ch = roll.data.index_axis(ndarray::Axis(0), instrument.channel());
    let ones: usize = ch.iter().map(|&v| v as usize).sum();
    ones as f64 / ch.len() as f64
}
