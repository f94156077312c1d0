use panlut::bench::CountingAlloc;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn main() {
    std::process::exit(panlut::cli::main_with_args(std::env::args_os()));
}
