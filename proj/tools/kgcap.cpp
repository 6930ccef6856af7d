#include "kgcap/cli.hpp"
int main(int c,char**v){return kgcap::cli::main(c,v);}
