use oxidet::ckpt;
use oxidet::data::{self, Dataset};
use oxidet::model::decode;
use oxidet::tensor::no_grad;

fn main() {
    let (model, _state) = ckpt::load::<f32>(std::path::Path::new("/tmp/ppflow/run/last.ckpt")).unwrap();
    let cfg = model.cfg.clone();
    println!("cfg.input_size={} conf={} nms={}", cfg.input_size, cfg.conf_thresh, cfg.nms_iou);

    let ds = Dataset::open(std::path::Path::new("/tmp/ppflow/data"), "val").unwrap();
    let (img, labels) = ds.load(0, cfg.num_classes).unwrap();
    println!("image {}x{}  labels={}", img.width, img.height, labels.len());
    let (x, gts, lb) = data::prepare::<f32>(&img, &labels, cfg.input_size).unwrap();
    for g in &gts {
        println!("gt class={} [{:.2},{:.2},{:.2},{:.2}]", g.class, g.x1, g.y1, g.x2, g.y2);
    }
    let x = x.reshape(&[1, 3, cfg.input_size, cfg.input_size]).unwrap();
    let raw = no_grad(|| model.forward(&x, false)).unwrap();
    let rows = decode(&cfg, &raw, 0.001, cfg.nms_iou).unwrap();
    let dets = &rows[0];
    println!("dets={}", dets.len());
    for d in dets.iter().take(8) {
        println!(
            "det class={} score={:.6} [{:.2},{:.2},{:.2},{:.2}]",
            d.class, d.score, d.x1, d.y1, d.x2, d.y2
        );
    }
    println!("letterbox {:?}", lb);
}
