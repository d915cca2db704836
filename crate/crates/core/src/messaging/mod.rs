//! Single IPC space: addressing, envelopes, bounded mailboxes, and the
//! replicated name table.

mod address;
mod mailbox;
mod names;

pub use address::{de_b64, ser_b64, Address, AddressError, DownNotice, DownReason, Envelope, GroupMode, MailItem, NameKey};
pub use mailbox::{MailQueue, MAILBOX_CAPACITY};
pub use names::{NameReplica, NameTableEntry, OriginTable, Registration};
