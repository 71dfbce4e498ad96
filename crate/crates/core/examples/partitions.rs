//! Toy blobs split IID, non-IID and as a stream, written to disk.
use fedmatch::data::{class_histogram, make_blobs, split_iid, split_noniid, split_streaming, LabelSite};

fn main() -> fedmatch::Result<()> {
    let ds = make_blobs(4, 8, 200, 1.5, 0)?;
    println!("{} instances, {} dims, {} classes", ds.len(), ds.dim(), ds.num_classes());

    let iid = split_iid(&ds, 5, 5, LabelSite::Clients, 0)?;
    let noniid = split_noniid(&ds, 5, 5, LabelSite::Clients, 0.3, 0)?;
    for (k, (a, b)) in iid.clients.iter().zip(&noniid.clients).enumerate() {
        println!(
            "client {k}: labeled {:?}, iid unlabeled {:?}, non-iid unlabeled {:?}",
            class_histogram(&ds, &a.labeled),
            class_histogram(&ds, &a.unlabeled),
            class_histogram(&ds, &b.unlabeled)
        );
    }

    let server = split_iid(&ds, 5, 5, LabelSite::Server, 0)?;
    println!("labels at server: {} labeled rows held centrally", server.server_labeled.len());

    let stream = split_streaming(&noniid, 4, 10)?;
    let chunks = stream.clients[0].stream_chunks.as_ref().unwrap();
    println!("client 0 stream chunk sizes {:?}", chunks.iter().map(Vec::len).collect::<Vec<_>>());

    let dir = std::env::temp_dir().join("fedmatch-partitions");
    std::fs::create_dir_all(&dir)?;
    ds.write_csv(&dir.join("blobs.csv"))?;
    stream.write(&dir.join("plan.json"))?;
    println!("wrote {}", dir.display());
    Ok(())
}
