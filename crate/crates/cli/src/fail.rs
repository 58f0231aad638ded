//! Failure classes and their process exit codes.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Other,
    Config,
    Data,
    Numerical,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Other => 1,
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numerical => 4,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Kind::Other => "error",
            Kind::Config => "configuration error",
            Kind::Data => "data error",
            Kind::Numerical => "numerical failure",
        }
    }
}

#[derive(Debug)]
pub struct Tagged {
    pub kind: Kind,
    msg: String,
}

impl fmt::Display for Tagged {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Tagged {}

pub fn config(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Tagged {
        kind: Kind::Config,
        msg: msg.into(),
    })
}

pub fn data(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Tagged {
        kind: Kind::Data,
        msg: msg.into(),
    })
}

pub fn numerical(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Tagged {
        kind: Kind::Numerical,
        msg: msg.into(),
    })
}

pub fn tag(kind: Kind, err: anyhow::Error) -> anyhow::Error {
    err.context(Tagged {
        kind,
        msg: kind.label().into(),
    })
}

fn classify(e: &labes::Error) -> Kind {
    use labes::Error as E;
    match e {
        E::Config(_) | E::InvalidSchema(_) | E::SchemaMismatch(_) => Kind::Config,
        E::NonFinite(_) => Kind::Numerical,
        E::Io { .. }
        | E::Json { .. }
        | E::MalformedRecord { .. }
        | E::UnknownDomain(_)
        | E::UnknownSlot(_)
        | E::MissingLabel(_)
        | E::Checkpoint(_)
        | E::Adapter { .. } => Kind::Data,
        _ => Kind::Other,
    }
}

pub fn kind(err: &anyhow::Error) -> Kind {
    if let Some(t) = err.downcast_ref::<Tagged>() {
        return t.kind;
    }
    err.chain()
        .find_map(|e| e.downcast_ref::<labes::Error>().map(classify))
        .unwrap_or(Kind::Other)
}
