// CLI entry point (subcommands wired in later stages of the build).

int main() { return 0; }
