use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

/// Append-only byte sink for canonical audit lines.
///
/// Deliberately exposes no update or delete.
pub trait AuditStorage: Send + Sync {
    /// Persist one line (without terminator). Must be durable on `Ok`.
    fn append_line(&mut self, seq: u64, line: &str) -> io::Result<()>;

    /// All persisted bytes, in order, `\n`-terminated lines.
    fn read_all(&self) -> io::Result<Vec<u8>>;
}

#[derive(Debug, Default, Clone)]
pub struct MemoryStorage {
    data: Vec<u8>,
    fail_writes: bool,
}

impl MemoryStorage {
    /// A store whose every write fails, for exercising the write-ahead contract.
    pub fn failing() -> Self {
        Self {
            data: Vec::new(),
            fail_writes: true,
        }
    }
}

impl AuditStorage for MemoryStorage {
    fn append_line(&mut self, _seq: u64, line: &str) -> io::Result<()> {
        if self.fail_writes {
            return Err(io::Error::other("audit storage unavailable"));
        }
        self.data.extend_from_slice(line.as_bytes());
        self.data.push(b'\n');
        Ok(())
    }

    fn read_all(&self) -> io::Result<Vec<u8>> {
        Ok(self.data.clone())
    }
}

const INDEX_FILE: &str = "index";

/// Segmented log directory.
///
/// `segment-<first_seq>.log` files hold the lines; `index` lists
/// `<first_seq> <file name>` per segment in creation order. A new segment starts
/// when the current one would exceed `max_segment_bytes`; the chain continues
/// across segments unchanged.
#[derive(Debug)]
pub struct SegmentedFileStorage {
    dir: PathBuf,
    max_segment_bytes: u64,
    segments: Vec<(u64, String)>,
    current: Option<(File, u64)>,
}

impl SegmentedFileStorage {
    pub const DEFAULT_SEGMENT_BYTES: u64 = 16 * 1024 * 1024;

    pub fn open(dir: impl AsRef<Path>, max_segment_bytes: u64) -> io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let index_path = dir.join(INDEX_FILE);
        let mut segments = Vec::new();
        if index_path.exists() {
            for line in fs::read_to_string(&index_path)?.lines() {
                let (seq, name) = line
                    .split_once(' ')
                    .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "bad index line"))?;
                let seq = seq
                    .parse()
                    .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "bad index seq"))?;
                segments.push((seq, name.to_string()));
            }
        }
        let current = match segments.last() {
            Some((_, name)) => {
                let file = OpenOptions::new().append(true).open(dir.join(name))?;
                let len = file.metadata()?.len();
                Some((file, len))
            }
            None => None,
        };
        Ok(Self {
            dir,
            max_segment_bytes: max_segment_bytes.max(1),
            segments,
            current,
        })
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn segment_paths(&self) -> Vec<PathBuf> {
        self.segments
            .iter()
            .map(|(_, n)| self.dir.join(n))
            .collect()
    }

    fn rotate(&mut self, first_seq: u64) -> io::Result<()> {
        let name = format!("segment-{first_seq:012}.log");
        let file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(self.dir.join(&name))?;
        let mut index = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join(INDEX_FILE))?;
        writeln!(index, "{first_seq} {name}")?;
        index.sync_data()?;
        self.segments.push((first_seq, name));
        self.current = Some((file, 0));
        Ok(())
    }
}

impl AuditStorage for SegmentedFileStorage {
    fn append_line(&mut self, seq: u64, line: &str) -> io::Result<()> {
        let needed = line.len() as u64 + 1;
        let must_rotate = match &self.current {
            None => true,
            Some((_, len)) => *len > 0 && len + needed > self.max_segment_bytes,
        };
        if must_rotate {
            self.rotate(seq)?;
        }
        let (file, len) = self.current.as_mut().expect("segment open after rotate");
        let mut buf = Vec::with_capacity(needed as usize);
        buf.extend_from_slice(line.as_bytes());
        buf.push(b'\n');
        file.write_all(&buf)?;
        file.sync_data()?;
        *len += needed;
        Ok(())
    }

    fn read_all(&self) -> io::Result<Vec<u8>> {
        let mut out = Vec::new();
        for path in self.segment_paths() {
            File::open(path)?.read_to_end(&mut out)?;
        }
        Ok(out)
    }
}
