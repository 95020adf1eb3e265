//! Scenario files.
//!
//! The primary format is line-delimited JSON, one scenario per line:
//!
//! ```text
//! {"version":1,"id":"s0","tick":0.1,
//!  "map":[{"kind":"lane","points":[[0.0,0.0],[50.0,0.0]]}],
//!  "agents":[{"id":0,"length":4.5,"width":1.9,"class":"vehicle","sdc":true,
//!             "states":[[0.0,0.0,0.0],null,[2.0,0.0,0.0]]}]}
//! ```
//!
//! `states` holds `[x, y, heading]` triples, `null` for unobserved steps.
//! Unknown fields are rejected.
//!
//! The packed variant is little-endian binary: magic `TJSC`, `u32` version,
//! `u64` scenario count, then per scenario: id (`u32` length + UTF-8),
//! `f64` tick, `u32` map object count, per object `u8` kind + `u32` point
//! count + `f64` pairs, `u32` agent count, `u32` step count, per agent
//! `u64` id, `f64` length, `f64` width, `u8` class, `u8` sdc, and per step
//! `u8` valid + three `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Agent, MapObject, MapObjectKind, Scenario};
use crate::error::{Error, Result};
use crate::geometry::{AgentClass, AgentMeta, AgentState};

pub const FORMAT_VERSION: u32 = 1;
const PACKED_MAGIC: &[u8; 4] = b"TJSC";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireScenario {
    version: u32,
    id: String,
    tick: f64,
    map: Vec<MapObject>,
    agents: Vec<WireAgent>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireAgent {
    id: u64,
    length: f64,
    width: f64,
    class: AgentClass,
    sdc: bool,
    states: Vec<Option<[f64; 3]>>,
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

impl From<&Scenario> for WireScenario {
    fn from(s: &Scenario) -> Self {
        WireScenario {
            version: FORMAT_VERSION,
            id: s.id.clone(),
            tick: s.tick,
            map: s.map.clone(),
            agents: s
                .agents
                .iter()
                .map(|a| WireAgent {
                    id: a.id,
                    length: a.meta.length,
                    width: a.meta.width,
                    class: a.meta.class,
                    sdc: a.sdc,
                    states: a.states.iter().map(|s| s.valid.then_some([s.x, s.y, s.h])).collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<WireScenario> for Scenario {
    type Error = Error;

    fn try_from(w: WireScenario) -> Result<Self> {
        let agents = w
            .agents
            .into_iter()
            .map(|a| {
                Ok(Agent {
                    id: a.id,
                    meta: AgentMeta::new(a.length, a.width, a.class)?,
                    sdc: a.sdc,
                    // Stored values are kept bit-exact; headings are
                    // wrapped on write.
                    states: a
                        .states
                        .into_iter()
                        .map(|s| match s {
                            Some([x, y, h]) => AgentState { x, y, h, valid: true },
                            None => AgentState::invalid(),
                        })
                        .collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let s = Scenario {
            id: w.id,
            tick: w.tick,
            map: w.map,
            agents,
        };
        s.validate()?;
        Ok(s)
    }
}

fn json_offset(text: &str, line_start: usize, err: &serde_json::Error) -> u64 {
    // serde_json reports 1-based line/column inside the parsed slice.
    let mut offset = line_start;
    let mut lines = text[line_start..].split_inclusive('\n');
    for _ in 1..err.line() {
        offset += lines.next().map_or(0, str::len);
    }
    (offset + err.column().saturating_sub(1)) as u64
}

/// Parses line-delimited JSON scenarios. Any malformed line fails the whole
/// read.
pub fn read_scenarios_from_str(text: &str) -> Result<Vec<Scenario>> {
    let mut out = Vec::new();
    let mut line_start = 0;
    for line in text.split_inclusive('\n') {
        let start = line_start;
        line_start += line.len();
        let body = line.trim_end_matches(['\n', '\r']);
        if body.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<WireScenario>(body) {
            Ok(w) => {
                if w.version != FORMAT_VERSION {
                    return Err(Error::Version {
                        found: w.version,
                        supported: FORMAT_VERSION,
                    });
                }
                out.push(Scenario::try_from(w)?);
            }
            Err(e) => {
                if let Ok(p) = serde_json::from_str::<VersionProbe>(body) {
                    if p.version != FORMAT_VERSION {
                        return Err(Error::Version {
                            found: p.version,
                            supported: FORMAT_VERSION,
                        });
                    }
                }
                return Err(Error::Parse {
                    offset: json_offset(text, start, &e),
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

pub fn write_scenarios_to_string(scenarios: &[Scenario]) -> String {
    let mut out = String::new();
    for s in scenarios {
        let mut wire = WireScenario::from(s);
        for a in &mut wire.agents {
            for st in a.states.iter_mut().flatten() {
                st[2] = crate::geometry::wrap_angle(st[2]);
            }
        }
        out.push_str(&serde_json::to_string(&wire).expect("scenario serializes"));
        out.push('\n');
    }
    out
}

pub fn read_scenarios(path: impl AsRef<Path>) -> Result<Vec<Scenario>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_scenarios_from_str(&text)
}

pub fn write_scenarios(path: impl AsRef<Path>, scenarios: &[Scenario]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_scenarios_to_string(scenarios)).map_err(|e| Error::io(path, e))
}

fn class_code(c: AgentClass) -> u8 {
    c as u8
}

fn class_from(code: u8) -> Option<AgentClass> {
    AgentClass::ALL.get(code as usize).copied()
}

const KINDS: [MapObjectKind; 4] = [
    MapObjectKind::Lane,
    MapObjectKind::RoadEdge,
    MapObjectKind::Crosswalk,
    MapObjectKind::Sidewalk,
];

pub fn write_scenarios_packed_to<W: Write>(mut w: W, scenarios: &[Scenario]) -> std::io::Result<()> {
    w.write_all(PACKED_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(scenarios.len() as u64).to_le_bytes())?;
    for s in scenarios {
        w.write_all(&(s.id.len() as u32).to_le_bytes())?;
        w.write_all(s.id.as_bytes())?;
        w.write_all(&s.tick.to_le_bytes())?;
        w.write_all(&(s.map.len() as u32).to_le_bytes())?;
        for m in &s.map {
            w.write_all(&[m.kind.index() as u8])?;
            w.write_all(&(m.points.len() as u32).to_le_bytes())?;
            for p in &m.points {
                w.write_all(&p[0].to_le_bytes())?;
                w.write_all(&p[1].to_le_bytes())?;
            }
        }
        w.write_all(&(s.agents.len() as u32).to_le_bytes())?;
        w.write_all(&(s.n_steps() as u32).to_le_bytes())?;
        for a in &s.agents {
            w.write_all(&a.id.to_le_bytes())?;
            w.write_all(&a.meta.length.to_le_bytes())?;
            w.write_all(&a.meta.width.to_le_bytes())?;
            w.write_all(&[class_code(a.meta.class), a.sdc as u8])?;
            for st in &a.states {
                w.write_all(&[st.valid as u8])?;
                for v in [st.x, st.y, st.h] {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse {
                offset: self.buf.len() as u64,
                message: format!("unexpected end of packed data (needed {n} bytes at {})", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn bad(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_scenarios_packed_from<R: Read>(mut r: R) -> Result<Vec<Scenario>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::io("<packed stream>", e))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != PACKED_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic, not a packed scenario file".into(),
        });
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let count = c.u64()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id_len = c.u32()? as usize;
        let id = std::str::from_utf8(c.take(id_len)?)
            .map_err(|_| c.bad("scenario id is not UTF-8"))?
            .to_owned();
        let tick = c.f64()?;
        let n_map = c.u32()? as usize;
        let mut map = Vec::with_capacity(n_map.min(1 << 12));
        for _ in 0..n_map {
            let kind = *KINDS
                .get(c.u8()? as usize)
                .ok_or_else(|| c.bad("unknown map object kind"))?;
            let n = c.u32()? as usize;
            let mut points = Vec::with_capacity(n.min(1 << 12));
            for _ in 0..n {
                points.push([c.f64()?, c.f64()?]);
            }
            map.push(MapObject { kind, points });
        }
        let n_agents = c.u32()? as usize;
        let n_steps = c.u32()? as usize;
        let mut agents = Vec::with_capacity(n_agents.min(1 << 12));
        for _ in 0..n_agents {
            let id = c.u64()?;
            let (length, width) = (c.f64()?, c.f64()?);
            let class = class_from(c.u8()?).ok_or_else(|| c.bad("unknown agent class"))?;
            let sdc = c.u8()? != 0;
            let mut states = Vec::with_capacity(n_steps);
            for _ in 0..n_steps {
                let valid = c.u8()? != 0;
                let (x, y, h) = (c.f64()?, c.f64()?, c.f64()?);
                states.push(if valid { AgentState { x, y, h, valid } } else { AgentState::invalid() });
            }
            agents.push(Agent {
                id,
                meta: AgentMeta::new(length, width, class)?,
                sdc,
                states,
            });
        }
        let s = Scenario { id, tick, map, agents };
        s.validate()?;
        out.push(s);
    }
    if c.pos != buf.len() {
        return Err(c.bad("trailing bytes after last scenario"));
    }
    Ok(out)
}

pub fn read_scenarios_packed(path: impl AsRef<Path>) -> Result<Vec<Scenario>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_scenarios_packed_from(std::io::BufReader::new(f))
}

pub fn write_scenarios_packed(path: impl AsRef<Path>, scenarios: &[Scenario]) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_scenarios_packed_to(&mut w, scenarios).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    const FIXTURE: &str = concat!(
        r#"{"version":1,"id":"fixture-2","tick":0.1,"map":[{"kind":"lane","points":[[0.0,0.0],[10.0,0.0]]},"#,
        r#"{"kind":"crosswalk","points":[[5.0,-2.0],[5.0,2.0]]}],"agents":["#,
        r#"{"id":7,"length":4.5,"width":2.0,"class":"vehicle","sdc":true,"states":[[0.0,0.0,0.0],[1.0,0.0,0.0],[2.0,0.5,0.25]]},"#,
        r#"{"id":9,"length":0.5,"width":0.5,"class":"pedestrian","sdc":false,"states":[[5.0,-2.0,1.5],null,[5.0,-1.8,1.5]]}]}"#,
        "\n"
    );

    fn corpus() -> Vec<Scenario> {
        generate_synthetic(&SynthConfig {
            n_scenarios: 4,
            dropout_prob: 0.05,
            ..SynthConfig::default()
        })
    }

    #[test]
    fn golden_fixture_fields() {
        let s = read_scenarios_from_str(FIXTURE).unwrap();
        assert_eq!(s.len(), 1);
        let s = &s[0];
        assert_eq!(s.id, "fixture-2");
        assert_eq!(s.tick, 0.1);
        assert_eq!(s.map.len(), 2);
        assert_eq!(s.map[1].kind, MapObjectKind::Crosswalk);
        assert_eq!(s.map[0].points, vec![[0.0, 0.0], [10.0, 0.0]]);
        assert_eq!(s.n_agents(), 2);
        assert_eq!(s.n_steps(), 3);
        assert_eq!(s.sdc_index(), Some(0));
        let ped = &s.agents[1];
        assert_eq!(ped.id, 9);
        assert_eq!(ped.meta.class, AgentClass::Pedestrian);
        assert_eq!(ped.meta.length, 0.5);
        assert!(!ped.states[1].valid);
        assert_eq!(ped.states[2], AgentState::new(5.0, -1.8, 1.5));
        assert_eq!(s.agents[0].states[2], AgentState::new(2.0, 0.5, 0.25));
        // And it writes back to the identical line.
        assert_eq!(write_scenarios_to_string(std::slice::from_ref(s)), FIXTURE);
    }

    #[test]
    fn json_round_trip() {
        let c = corpus();
        let text = write_scenarios_to_string(&c);
        assert_eq!(read_scenarios_from_str(&text).unwrap(), c);
    }

    #[test]
    fn packed_round_trip() {
        let c = corpus();
        let mut buf = Vec::new();
        write_scenarios_packed_to(&mut buf, &c).unwrap();
        assert_eq!(read_scenarios_packed_from(&buf[..]).unwrap(), c);
    }

    #[test]
    fn truncated_json_fails_with_offset() {
        let text = write_scenarios_to_string(&corpus());
        let cut = &text[..text.len() - 40];
        match read_scenarios_from_str(cut) {
            Err(Error::Parse { offset, .. }) => assert!(offset as usize <= cut.len() && offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_offset_points_at_bad_byte() {
        let bad = FIXTURE.replace("\"tick\":0.1", "\"tick\":x.1");
        let at = bad.find("x.1").unwrap() as u64;
        match read_scenarios_from_str(&format!("{FIXTURE}{bad}")) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, FIXTURE.len() as u64 + at),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_packed_fails() {
        let mut buf = Vec::new();
        write_scenarios_packed_to(&mut buf, &corpus()).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_scenarios_packed_from(&buf[..]), Err(Error::Parse { .. })));
    }

    #[test]
    fn unknown_fields_and_versions_rejected() {
        let extra = FIXTURE.replace("\"tick\":0.1", "\"tick\":0.1,\"weather\":\"rain\"");
        assert!(matches!(read_scenarios_from_str(&extra), Err(Error::Parse { .. })));
        let v2 = FIXTURE.replace("\"version\":1", "\"version\":2");
        assert!(matches!(read_scenarios_from_str(&v2), Err(Error::Version { found: 2, .. })));
        let v2_extra = v2.replace("\"tick\":0.1", "\"tick\":0.1,\"weather\":\"rain\"");
        assert!(matches!(read_scenarios_from_str(&v2_extra), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn two_sdc_flags_rejected() {
        let two = FIXTURE.replace("\"sdc\":false", "\"sdc\":true");
        assert!(read_scenarios_from_str(&two).is_err());
    }
}
