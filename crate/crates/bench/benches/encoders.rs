use criterion::{criterion_group, criterion_main, Criterion};
use medunic::model::{project, stack_images, text_encode, vision_encode, Projector};
use medunic::Graph;
use medunic_bench::{images, model, reports};

fn encoders(c: &mut Criterion) {
    let params = model();
    let text = reports(64);
    let imgs = images(64);
    let refs: Vec<_> = imgs.iter().collect();
    let stacked = stack_images(&refs).unwrap();

    c.bench_function("text_encoder_forward_64", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let b = params.bind(&g);
            text_encode(&g, &b, &text, false, 0).unwrap()
        })
    });
    c.bench_function("text_encoder_backward_64", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let b = params.bind(&g);
            let t = text_encode(&g, &b, &text, true, 1).unwrap();
            let p = project(&g, &b, Projector::L, t.pooled).unwrap();
            let l = g.sum(p);
            g.backward(l).unwrap();
        })
    });
    c.bench_function("vision_encoder_forward_64", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let b = params.bind(&g);
            vision_encode(&g, &b, &stacked).unwrap()
        })
    });
    c.bench_function("vision_encoder_backward_64", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let b = params.bind(&g);
            let v = vision_encode(&g, &b, &stacked).unwrap();
            let p = project(&g, &b, Projector::V, v).unwrap();
            let l = g.sum(p);
            g.backward(l).unwrap();
        })
    });
}

criterion_group!(benches, encoders);
criterion_main!(benches);
