//! Brute-force re-execution of the acquire/release algorithms over plain
//! arrays. Shares no code with the crate's interlock.

pub const FREE: i32 = -1;
pub const FAULT: i32 = -2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ev {
    Acquire { op: usize, mask: u32 },
    Release { op: usize },
    Fault { op: usize },
    Clear { res: usize },
}

#[derive(Debug, Clone)]
pub struct Oracle {
    pub owner: Vec<i32>,
    /// (op, mask, priority), in arrival order; sorted only when scanned.
    pub queue: Vec<(usize, u32, i64)>,
    pub prio: Vec<i64>,
}

/// Snapshot after one event: owners, queue sorted by priority, ops granted by the event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub owner: Vec<i32>,
    pub queue: Vec<(usize, u32)>,
    pub granted: Vec<usize>,
}

impl Oracle {
    pub fn new(resources: usize, prio: Vec<i64>) -> Self {
        Self {
            owner: vec![FREE; resources],
            queue: Vec::new(),
            prio,
        }
    }

    fn free(&self, mask: u32) -> bool {
        (0..self.owner.len()).all(|r| mask & (1 << r) == 0 || self.owner[r] == FREE)
    }

    fn take(&mut self, op: usize, mask: u32) {
        for r in 0..self.owner.len() {
            if mask & (1 << r) != 0 {
                self.owner[r] = op as i32;
            }
        }
    }

    fn scan(&mut self) -> Vec<usize> {
        let mut q = std::mem::take(&mut self.queue);
        // bubble sort, descending priority
        for i in 0..q.len() {
            for j in 0..q.len() - 1 - i {
                if q[j].2 < q[j + 1].2 {
                    q.swap(j, j + 1);
                }
            }
        }
        let mut granted = Vec::new();
        for (op, mask, p) in q {
            if self.free(mask) {
                self.take(op, mask);
                granted.push(op);
            } else {
                self.queue.push((op, mask, p));
            }
        }
        granted
    }

    pub fn apply(&mut self, ev: Ev) -> Snapshot {
        let granted = match ev {
            Ev::Acquire { op, mask } => {
                if self.free(mask) {
                    self.take(op, mask);
                    vec![op]
                } else {
                    if !self.queue.iter().any(|e| e.0 == op) {
                        self.queue.push((op, mask, self.prio[op]));
                    }
                    vec![]
                }
            }
            Ev::Release { op } => {
                for o in self.owner.iter_mut() {
                    if *o == op as i32 {
                        *o = FREE;
                    }
                }
                self.scan()
            }
            Ev::Fault { op } => {
                for o in self.owner.iter_mut() {
                    if *o == op as i32 {
                        *o = FAULT;
                    }
                }
                vec![]
            }
            Ev::Clear { res } => {
                if self.owner[res] == FAULT {
                    self.owner[res] = FREE;
                    self.scan()
                } else {
                    vec![]
                }
            }
        };
        let mut queue: Vec<(usize, u32, i64)> = self.queue.clone();
        queue.sort_by_key(|e| std::cmp::Reverse(e.2));
        Snapshot {
            owner: self.owner.clone(),
            queue: queue.into_iter().map(|(o, m, _)| (o, m)).collect(),
            granted,
        }
    }
}
