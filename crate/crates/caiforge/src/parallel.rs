//! Bounded worker-pool map that preserves input order.

/// Apply `f` to every item on up to `workers` threads and return results in
/// input order. Each result depends only on its own item, so the output is
/// identical for any worker count.
pub fn map_ordered<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, item)| f(i, item)).collect();
    }

    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<R>>> =
        items.iter().map(|_| std::sync::Mutex::new(None)).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if idx >= items.len() {
                    break;
                }
                let result = f(idx, &items[idx]);
                *slots[idx].lock().expect("slot lock") = Some(result);
            });
        }
    });

    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("slot lock").expect("slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order_for_any_worker_count() {
        let items: Vec<u32> = (0..100).collect();
        let serial = map_ordered(&items, 1, |_, x| x * 2);
        for workers in [2, 8, 16] {
            assert_eq!(map_ordered(&items, workers, |_, x| x * 2), serial);
        }
    }

    #[test]
    fn handles_empty_input() {
        let out: Vec<u32> = map_ordered(&Vec::<u32>::new(), 4, |_, x| *x);
        assert!(out.is_empty());
    }
}
