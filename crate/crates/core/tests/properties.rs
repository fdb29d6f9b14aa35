use std::collections::{BTreeSet, HashSet};

use chrono::{TimeZone, Utc};
use proptest::prelude::*;

use orig_core::gateways::{
    fingerprint, Cassette, CassetteMode, Modality, PlannedQuery, ServiceKind, Session,
};
use orig_core::knowledge::{
    BlobStore, ContentHash, ImageEvidence, KnowledgeBase, TextEvidence, DIGEST_HEADER, MIN_DIGEST_CHARS,
};
use orig_core::pipeline::bound_queries;
use orig_core::scripted::{png_bytes, Scenario, ScriptedDownloader, ScriptedModel, ScriptedReader, ScriptedSearch};
use orig_core::gateways::VirtualClock;

fn text(content: &str) -> TextEvidence {
    TextEvidence::new(
        content,
        format!("https://example.com/{}", content.len()),
        "snippet",
        Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap(),
        "q",
    )
}

fn image(seed: u8) -> ImageEvidence {
    let hash = ContentHash::of_bytes(&[seed; 8]);
    ImageEvidence {
        blob_key: hash.to_hex(),
        title: format!("img {seed}"),
        source_url: format!("https://img.example/{seed}.png"),
        query_of_origin: "q".into(),
        content_hash: hash,
        mime: "image/png".into(),
        width: 2,
        height: 2,
    }
}

fn hashes(kb: &KnowledgeBase) -> Vec<ContentHash> {
    kb.texts()
        .iter()
        .map(|t| t.content_hash)
        .chain(kb.images().iter().map(|i| i.content_hash))
        .collect()
}

proptest! {
    #[test]
    fn merge_matches_set_union(batches in prop::collection::vec(
        (prop::collection::vec("[a-d]{1,3}", 0..6), prop::collection::vec(0u8..6, 0..4)), 1..6)
    ) {
        let mut kb = KnowledgeBase::new();
        let mut seen: Vec<ContentHash> = Vec::new();
        for (round, (ts, is)) in batches.iter().enumerate() {
            let texts: Vec<TextEvidence> = ts.iter().map(|s| text(s)).collect();
            let images: Vec<ImageEvidence> = is.iter().map(|&s| image(s)).collect();
            let before: HashSet<ContentHash> = hashes(&kb).into_iter().collect();
            kb = kb.merge(&texts, &images, round as u32);
            for h in texts.iter().map(|t| t.content_hash).chain(images.iter().map(|i| i.content_hash)) {
                if !seen.contains(&h) {
                    seen.push(h);
                }
            }
            let now = hashes(&kb);
            let now_set: HashSet<ContentHash> = now.iter().copied().collect();
            prop_assert_eq!(now.len(), now_set.len(), "duplicate entries");
            prop_assert!(before.is_subset(&now_set));
            prop_assert_eq!(&now_set, &seen.iter().copied().collect::<HashSet<_>>());
            for h in &now_set {
                let r = kb.round_of(h).unwrap();
                prop_assert!(before.contains(h) || r == round as u32);
            }
        }
    }

    #[test]
    fn digest_respects_budget(contents in prop::collection::vec("[a-z ]{0,300}", 0..12), budget in 0usize..3000) {
        let texts: Vec<TextEvidence> = contents.iter().enumerate().map(|(i, c)| text(&format!("{i}{c}"))).collect();
        let mut kb = KnowledgeBase::new();
        for (round, chunk) in texts.chunks(3).enumerate() {
            kb = kb.merge(chunk, &[image(round as u8)], round as u32);
        }
        let digest = kb.context_digest(budget);
        prop_assert!(digest.starts_with(DIGEST_HEADER));
        prop_assert!(digest.chars().count() <= budget.max(MIN_DIGEST_CHARS));
        prop_assert_eq!(digest, kb.context_digest(budget));
    }

    #[test]
    fn fingerprint_is_a_function_of_service_and_request(a in ".{0,40}", b in ".{0,40}") {
        let fa = fingerprint(ServiceKind::TextSearch, &a);
        prop_assert_eq!(&fa, &fingerprint(ServiceKind::TextSearch, &a.clone()));
        prop_assert_eq!(fa.len(), 64);
        prop_assert_ne!(&fa, &fingerprint(ServiceKind::ImageSearch, &a));
        if a != b {
            prop_assert_ne!(fa, fingerprint(ServiceKind::TextSearch, &b));
        }
    }

    #[test]
    fn bound_queries_keeps_first_five_nonblank(qs in prop::collection::vec(("[ a-z]{0,6}", any::<bool>()), 0..12)) {
        let planned: Vec<PlannedQuery> = qs
            .iter()
            .map(|(q, img)| PlannedQuery { modality: if *img { Modality::Image } else { Modality::Text }, query: q.clone() })
            .collect();
        let usable: Vec<PlannedQuery> = planned
            .iter()
            .filter(|q| !q.query.trim().is_empty())
            .map(|q| PlannedQuery { modality: q.modality, query: q.query.trim().to_string() })
            .collect();
        let (kept, proposed) = bound_queries(planned);
        prop_assert_eq!(proposed, usable.len());
        prop_assert_eq!(kept.len(), usable.len().min(5));
        prop_assert_eq!(&kept[..], &usable[..kept.len()]);
    }

    #[test]
    fn select_images_matches_brute_force(
        n in 1usize..12,
        keep in 1usize..6,
        dead in prop::collection::btree_set(1usize..12, 0..5),
        dupes in prop::collection::vec((1usize..12, 1usize..12), 0..4),
        broken in prop::collection::btree_set(1usize..12, 0..3),
    ) {
        let hits = ScriptedSearch::synthetic_image_hits("prop", n);
        let url = |i: usize| hits[i - 1].fetch_url().to_string();
        let mut downloader = ScriptedDownloader::new();
        // oracle bodies: None for dead links
        let mut bodies: Vec<Option<Vec<u8>>> = (1..=n).map(|i| Some(png_bytes(&url(i)))).collect();
        for &(i, j) in &dupes {
            if i <= n && j <= n {
                bodies[i - 1] = Some(png_bytes(&url(j)));
                downloader = downloader.body(&url(i), png_bytes(&url(j)));
            }
        }
        for &i in broken.iter().filter(|&&i| i <= n) {
            bodies[i - 1] = Some(b"not an image".to_vec());
            downloader = downloader.body(&url(i), b"not an image".to_vec());
        }
        for &i in dead.iter().filter(|&&i| i <= n) {
            bodies[i - 1] = None;
            downloader = downloader.dead(&url(i));
        }
        let mut want = Vec::new();
        let mut seen = BTreeSet::new();
        for (i, body) in bodies.iter().enumerate() {
            if want.len() == keep {
                break;
            }
            if let Some(b) = body {
                if b.as_slice() != b"not an image" && seen.insert(b.clone()) {
                    want.push(url(i + 1));
                }
            }
        }

        let clock = VirtualClock::new();
        let sc = Scenario::build(clock.clone(), ScriptedModel::new(), ScriptedSearch::new(), ScriptedReader::new(), downloader);
        let session = Session::new(sc.services(), Cassette::new(CassetteMode::Passthrough), BlobStore::new());
        let got = session.select_images("prop", &hits, keep).unwrap();
        let got_urls: Vec<String> = got.iter().map(|i| i.source_url.clone()).collect();
        prop_assert_eq!(got_urls, want);
        for img in &got {
            prop_assert!(session.blobs().get(&img.content_hash).is_some());
        }
    }
}
