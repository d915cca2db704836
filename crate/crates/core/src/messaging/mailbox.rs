use std::collections::VecDeque;

use super::MailItem;

/// Queued items beyond which the oldest is dropped.
pub const MAILBOX_CAPACITY: usize = 4096;

/// Bounded FIFO with oldest-drop overflow.
#[derive(Debug)]
pub struct MailQueue {
    items: VecDeque<MailItem>,
    capacity: usize,
    dropped: u64,
    delivered: u64,
}

impl Default for MailQueue {
    fn default() -> Self {
        Self::with_capacity(MAILBOX_CAPACITY)
    }
}

impl MailQueue {
    pub fn with_capacity(capacity: usize) -> Self {
        Self { items: VecDeque::new(), capacity: capacity.max(1), dropped: 0, delivered: 0 }
    }

    pub fn push(&mut self, item: MailItem) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
            self.dropped += 1;
        }
        self.items.push_back(item);
        self.delivered += 1;
    }

    pub fn pop(&mut self) -> Option<MailItem> {
        self.items.pop_front()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    /// Items ever enqueued, including ones later dropped.
    pub fn delivered(&self) -> u64 {
        self.delivered
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messaging::{DownNotice, DownReason};

    fn item(seq: u64) -> MailItem {
        let npid = crate::model::Npid::new(crate::model::NodeId::new(1, 1), seq).unwrap();
        MailItem::Down(DownNotice::without_process(npid, DownReason::Noproc))
    }

    #[test]
    fn oldest_dropped_on_overflow() {
        let mut q = MailQueue::with_capacity(3);
        for s in 0..5 {
            q.push(item(s));
        }
        assert_eq!(q.dropped(), 2);
        assert_eq!(q.len(), 3);
        assert_eq!(q.pop(), Some(item(2)));
    }

    #[test]
    fn default_bound() {
        let mut q = MailQueue::default();
        for s in 0..MAILBOX_CAPACITY as u64 + 1 {
            q.push(item(s));
        }
        assert_eq!(q.len(), MAILBOX_CAPACITY);
        assert_eq!(q.dropped(), 1);
    }
}
