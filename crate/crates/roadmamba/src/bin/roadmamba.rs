fn main() {
    roadmamba::cli::main();
}
