mod conv;
mod elementwise;
mod loss;
mod matmul;
mod norm;
mod shape;
mod softmax;
mod upsample;

