#![no_main]

use hybridps::transport::tcp::AddressBook;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(book) = AddressBook::decode(data) {
        assert_eq!(AddressBook::decode(&book.encode()).unwrap().entries, book.entries);
    }
});
