//! Byte-charged LRU map over an index slab.
//!
//! Nodes live in a `Vec` and link to each other by `u32` index, so an entry
//! costs one slab slot plus one hash-map entry. Every entry carries a charge;
//! the map evicts from the cold end until a new entry fits under the budget.

use std::collections::HashMap;
use std::hash::Hash;

const NIL: u32 = u32::MAX;

#[derive(Debug)]
struct Node<K, V> {
    key: K,
    value: V,
    charge: usize,
    prev: u32,
    next: u32,
}

#[derive(Debug)]
pub struct LruMap<K, V> {
    nodes: Vec<Option<Node<K, V>>>,
    free: Vec<u32>,
    index: HashMap<K, u32>,
    head: u32, // most recent
    tail: u32, // least recent
    capacity: usize,
    charged: usize,
}

impl<K: Hash + Eq + Clone, V> LruMap<K, V> {
    pub fn new(capacity: usize) -> Self {
        Self {
            nodes: Vec::new(),
            free: Vec::new(),
            index: HashMap::new(),
            head: NIL,
            tail: NIL,
            capacity,
            charged: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn charged(&self) -> usize {
        self.charged
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    fn node(&self, i: u32) -> &Node<K, V> {
        self.nodes[i as usize].as_ref().expect("live node")
    }

    fn node_mut(&mut self, i: u32) -> &mut Node<K, V> {
        self.nodes[i as usize].as_mut().expect("live node")
    }

    fn unlink(&mut self, i: u32) {
        let (prev, next) = {
            let n = self.node(i);
            (n.prev, n.next)
        };
        if prev == NIL {
            self.head = next;
        } else {
            self.node_mut(prev).next = next;
        }
        if next == NIL {
            self.tail = prev;
        } else {
            self.node_mut(next).prev = prev;
        }
    }

    fn push_front(&mut self, i: u32) {
        let old = self.head;
        {
            let n = self.node_mut(i);
            n.prev = NIL;
            n.next = old;
        }
        if old == NIL {
            self.tail = i;
        } else {
            self.node_mut(old).prev = i;
        }
        self.head = i;
    }

    /// Looks up `key` and marks it most recently used.
    pub fn get(&mut self, key: &K) -> Option<&V> {
        let i = *self.index.get(key)?;
        if self.head != i {
            self.unlink(i);
            self.push_front(i);
        }
        Some(&self.node(i).value)
    }

    pub fn peek(&self, key: &K) -> Option<&V> {
        self.index.get(key).map(|&i| &self.node(i).value)
    }

    pub fn contains(&self, key: &K) -> bool {
        self.index.contains_key(key)
    }

    /// Inserts or replaces `key`. Returns the evicted entries, or `Err(value)`
    /// when `charge` alone exceeds the capacity.
    pub fn insert(&mut self, key: K, value: V, charge: usize) -> Result<Vec<(K, V)>, V> {
        if charge > self.capacity {
            return Err(value);
        }
        let mut evicted = Vec::new();
        if let Some((_, old)) = self.remove(&key) {
            drop(old);
        }
        while self.charged + charge > self.capacity {
            match self.pop_lru() {
                Some(kv) => evicted.push(kv),
                None => break,
            }
        }
        let node = Node {
            key: key.clone(),
            value,
            charge,
            prev: NIL,
            next: NIL,
        };
        let i = match self.free.pop() {
            Some(i) => {
                self.nodes[i as usize] = Some(node);
                i
            }
            None => {
                self.nodes.push(Some(node));
                (self.nodes.len() - 1) as u32
            }
        };
        self.push_front(i);
        self.index.insert(key, i);
        self.charged += charge;
        Ok(evicted)
    }

    pub fn remove(&mut self, key: &K) -> Option<(K, V)> {
        let i = self.index.remove(key)?;
        self.unlink(i);
        let node = self.nodes[i as usize].take().expect("live node");
        self.free.push(i);
        self.charged -= node.charge;
        Some((node.key, node.value))
    }

    pub fn pop_lru(&mut self) -> Option<(K, V)> {
        if self.tail == NIL {
            return None;
        }
        let key = self.node(self.tail).key.clone();
        self.remove(&key)
    }

    /// Keys from most to least recently used.
    pub fn keys_mru(&self) -> Vec<K> {
        let mut out = Vec::with_capacity(self.len());
        let mut i = self.head;
        while i != NIL {
            let n = self.node(i);
            out.push(n.key.clone());
            i = n.next;
        }
        out
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.free.clear();
        self.index.clear();
        self.head = NIL;
        self.tail = NIL;
        self.charged = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn evicts_least_recent() {
        let mut m = LruMap::new(2);
        m.insert("a", 1, 1).unwrap();
        m.insert("b", 2, 1).unwrap();
        assert_eq!(m.get(&"a"), Some(&1));
        let ev = m.insert("c", 3, 1).unwrap();
        assert_eq!(ev, vec![("b", 2)]);
        assert_eq!(m.keys_mru(), vec!["c", "a"]);
    }

    #[test]
    fn oversize_refused() {
        let mut m: LruMap<u32, u32> = LruMap::new(10);
        assert_eq!(m.insert(1, 5, 11), Err(5));
        assert!(m.is_empty());
    }

    #[test]
    fn replace_updates_charge() {
        let mut m = LruMap::new(10);
        m.insert(1, (), 4).unwrap();
        m.insert(1, (), 6).unwrap();
        assert_eq!(m.charged(), 6);
        assert_eq!(m.len(), 1);
    }

    proptest! {
        #[test]
        fn charge_never_exceeds_capacity(ops in prop::collection::vec((0u16..64, 1usize..40), 1..400)) {
            let mut m = LruMap::new(100);
            for (k, c) in ops {
                let _ = m.insert(k, (), c);
                prop_assert!(m.charged() <= 100);
                prop_assert_eq!(m.keys_mru().len(), m.len());
            }
        }
    }
}
