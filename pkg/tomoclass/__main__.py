from tomoclass.cli import main

main()
