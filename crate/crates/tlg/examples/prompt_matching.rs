//! Prompt banks and maximum matching: load the built-in banks, encode
//! prompts with the hashing stub, and match a few visual summaries.

use ndarray::Array1;
use tlg::hc::{max_match, HashingTextEncoder, PromptBank, TextEncoder};

fn main() {
    for name in ["synthetic", "pascal", "coco"] {
        let bank = PromptBank::builtin(name).expect("bank");
        println!("{name}: {} categories", bank.len());
    }

    let pascal = PromptBank::builtin("pascal").expect("bank");
    let bird = pascal.records().iter().find(|r| r.category_name == "bird").unwrap();
    println!(
        "bird -> fine-grained '{}', backgrounds {:?}",
        bird.fine_grained_prompt, bird.backgrounds
    );

    let enc = HashingTextEncoder::new(64);
    let names: Vec<&str> = pascal.records().iter().map(|r| r.category_name.as_str()).collect();
    let fg = enc.encode(&names).expect("encode");

    // a summary equal to a category row matches that category
    for probe in ["bird", "bus", "sheep"] {
        let idx = names.iter().position(|n| *n == probe).unwrap();
        let m = max_match(&fg.row(idx), &fg);
        println!("summary = embedding('{probe}') matches '{}' (cosine {:.3})", names[m.category], m.similarity);
    }

    // related prompts beat unrelated ones under the stub
    let triple = enc.encode(&["bird", "bird with feathers", "bus"]).expect("encode");
    println!(
        "stub cosine: (bird, bird with feathers) = {:.3}, (bird, bus) = {:.3}",
        triple.row(0).dot(&triple.row(1)),
        triple.row(0).dot(&triple.row(2))
    );

    // an all-zero summary ties everywhere and resolves to category 0
    let zero = Array1::<f64>::zeros(64);
    let m = max_match(&zero.view(), &fg);
    println!("zero summary resolves to the lowest id: {} ({})", m.category, names[m.category]);
}
