use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Interaction, Vocab};
use crate::config::KeyValues;
use crate::error::{Error, Result};

/// One user's interactions in `(timestamp, line)` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserHistory {
    pub user_id: u32,
    pub interactions: Vec<Interaction>,
}

impl UserHistory {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }
}

/// Contents of the `key=value` header that sits next to an interaction file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub num_users: usize,
    pub num_items: usize,
    pub num_behaviors: usize,
    /// Optional display names, used for attention-map legends.
    pub behavior_names: Vec<String>,
}

impl DatasetHeader {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.num_items, self.num_behaviors)
    }

    pub fn behavior_name(&self, b: usize) -> String {
        self.behavior_names
            .get(b)
            .cloned()
            .unwrap_or_else(|| format!("b{b}"))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "num_users={}\nnum_items={}\nnum_behaviors={}\n",
            self.num_users, self.num_items, self.num_behaviors
        );
        if !self.behavior_names.is_empty() {
            s.push_str(&format!("behavior_names={}\n", self.behavior_names.join(",")));
        }
        s
    }
}

/// A loaded interaction file: header plus per-user ordered histories.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub users: Vec<UserHistory>,
}

impl Dataset {
    pub fn vocab(&self) -> Vocab {
        self.header.vocab()
    }

    pub fn interactions(&self) -> impl Iterator<Item = &Interaction> {
        self.users.iter().flat_map(|u| u.interactions.iter())
    }

    pub fn num_interactions(&self) -> usize {
        self.users.iter().map(UserHistory::len).sum()
    }
}

/// `data.tsv` → `data.tsv.header`.
pub fn header_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".header");
    PathBuf::from(s)
}

pub fn read_header(path: &Path) -> Result<DatasetHeader> {
    let kv = KeyValues::load(path)?;
    let get = |k: &str| -> Result<usize> {
        kv.get(k)
            .ok_or_else(|| Error::Config(format!("{}: missing key {k}", path.display())))?
            .parse()
            .map_err(|_| Error::Config(format!("{}: key {k} is not an integer", path.display())))
    };
    let header = DatasetHeader {
        num_users: get("num_users")?,
        num_items: get("num_items")?,
        num_behaviors: get("num_behaviors")?,
        behavior_names: kv
            .get("behavior_names")
            .map(|s| s.split(',').map(|x| x.trim().to_string()).collect())
            .unwrap_or_default(),
    };
    if header.num_items == 0 || header.num_behaviors == 0 {
        return Err(Error::Config(format!(
            "{}: vocabulary sizes must be positive",
            path.display()
        )));
    }
    Ok(header)
}

pub fn write_header(path: &Path, header: &DatasetHeader) -> Result<()> {
    fs::write(path, header.to_text()).map_err(|e| Error::io(path, e))
}

/// Parses tab-separated `user item behavior timestamp` lines. Blank lines are
/// skipped; line numbers in errors are 1-based.
pub fn parse_interactions(text: &str, vocab: &Vocab) -> Result<Vec<(usize, Interaction)>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 4 tab-separated fields, found {}", fields.len()),
            });
        }
        let num = |i: usize, what: &str| -> Result<u64> {
            fields[i].trim().parse::<u64>().map_err(|_| Error::Parse {
                line,
                msg: format!("{what} {:?} is not a non-negative integer", fields[i]),
            })
        };
        let user = num(0, "user_id")?;
        let item = num(1, "item_id")?;
        let behavior = num(2, "behavior_id")?;
        let timestamp = num(3, "timestamp")?;
        if item >= vocab.num_items as u64 {
            return Err(Error::Validation {
                line,
                msg: format!("item_id {item} >= num_items {}", vocab.num_items),
            });
        }
        if behavior >= vocab.num_behaviors as u64 {
            return Err(Error::Validation {
                line,
                msg: format!("behavior_id {behavior} >= num_behaviors {}", vocab.num_behaviors),
            });
        }
        let user_id = u32::try_from(user).map_err(|_| Error::Validation {
            line,
            msg: format!("user_id {user} out of range"),
        })?;
        out.push((
            line,
            Interaction {
                user_id,
                item_id: item as u32,
                behavior_id: behavior as u32,
                timestamp,
            },
        ));
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

/// Groups by user (ascending id) and orders each group by `(timestamp, line)`.
pub fn group_interactions(lines: Vec<(usize, Interaction)>) -> Vec<UserHistory> {
    let mut by_user: BTreeMap<u32, Vec<(usize, Interaction)>> = BTreeMap::new();
    for (line, it) in lines {
        by_user.entry(it.user_id).or_default().push((line, it));
    }
    by_user
        .into_iter()
        .map(|(user_id, mut v)| {
            v.sort_by_key(|(line, it)| (it.timestamp, *line));
            UserHistory {
                user_id,
                interactions: v.into_iter().map(|(_, it)| it).collect(),
            }
        })
        .collect()
}

pub fn load_interactions(path: &Path, vocab: &Vocab) -> Result<Vec<UserHistory>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(group_interactions(parse_interactions(&text, vocab)?))
}

/// Loads an interaction file together with its sibling header.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let header = read_header(&header_path(path))?;
    let users = load_interactions(path, &header.vocab())?;
    Ok(Dataset { header, users })
}

pub fn write_interactions(path: &Path, users: &[UserHistory]) -> Result<()> {
    let mut s = String::new();
    for u in users {
        for it in &u.interactions {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                it.user_id, it.item_id, it.behavior_id, it.timestamp
            ));
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
