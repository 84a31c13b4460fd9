//! Retrieval metrics from first principles: rank a toy gallery by Euclidean
//! distance and read off the CMC curve and mean average precision.

use gatn::eval::{average_precision, cmc, euclidean_distance, mean_average_precision, rank_gallery};

fn main() {
    // two queries in a 2-D embedding space, five gallery points each
    let queries = vec![vec![0.0, 0.0], vec![5.0, 5.0]];
    let gallery = vec![
        vec![0.2, 0.1],  // near query 0
        vec![4.8, 5.0],  // distractor near query 1
        vec![3.0, 0.0],
        vec![0.4, -0.3], // near query 0
        vec![5.4, 4.6],
    ];
    // ground truth: which gallery entries share the query's identity;
    // query 1's true matches sit behind the distractor
    let matches = [vec![0usize, 3], vec![4]];

    let mut relevance = Vec::new();
    for (q, qe) in queries.iter().enumerate() {
        let row: Vec<f64> = gallery.iter().map(|g| euclidean_distance(qe, g)).collect();
        let order = rank_gallery(&row);
        println!("query {q} ranking: {order:?}");
        let rel: Vec<bool> = order.iter().map(|g| matches[q].contains(g)).collect();
        println!("  relevance: {rel:?}  AP: {:.4}", average_precision(&rel).unwrap());
        relevance.push(rel);
    }

    let curve = cmc(&relevance, 5).unwrap();
    for (r, v) in curve.iter().enumerate() {
        println!("rank-{}: {:.2}", r + 1, v);
    }
    println!("mAP: {:.4}", mean_average_precision(&relevance).unwrap());
}
